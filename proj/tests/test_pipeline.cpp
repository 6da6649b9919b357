#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "nstaug/pipeline.hpp"

using namespace nstaug;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("nstaug_test_pipeline_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Image pattern(std::size_t h, std::size_t w) {
  Image img(h, w);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels()[i] = static_cast<double>(i + 1) / static_cast<double>(img.size() + 1);
  return img;
}

PipelineConfig tiny_config(const fs::path& out) {
  PipelineConfig c;
  c.output = out;
  c.synthetic_per_class = 4;
  c.srad.scales = 2;
  c.srad.iterations_per_scale = 2;
  c.nst.iterations = 4;
  c.explain_images = 2;
  c.train.epochs = 2;
  c.train.patience = 2;
  c.train.learning_rate = 0.01;
  c.benchmark_workers = {1, 2};
  c.benchmark_images = 1;
  return c;
}

}  // namespace

TEST_CASE("ingest") {
  const fs::path root = fresh_dir("ingest");
  fs::create_directories(root / "benign");
  fs::create_directories(root / "malignant");
  Dataset empty = ingest(root);
  CHECK(empty.items.empty());
  CHECK(empty.count(Label::benign) == 0);

  for (const char* n : {"c.pgm", "a.pgm", "b.pgm"}) write_pgm(pattern(8, 8), root / "benign" / n);
  for (const char* n : {"z.pgm", "y.pgm"}) write_pgm(pattern(8, 9), root / "malignant" / n);
  const Dataset ds = ingest(root);
  CHECK(ds.count(Label::benign) == 3);
  CHECK(ds.count(Label::malignant) == 2);
  CHECK(ds.items[0].path.filename() == "a.pgm");
  CHECK(ds.items[3].path.filename() == "y.pgm");
  const Dataset again = ingest(root);
  REQUIRE(again.items.size() == ds.items.size());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    CHECK(again.items[i].path == ds.items[i].path);
    CHECK(file_checksum(again.items[i].path) == file_checksum(ds.items[i].path));
  }
  CHECK(ds.load()[0].id == "benign/a.pgm");

  std::ofstream(root / "malignant" / "broken.pgm") << "not an image";
  try {
    ingest(root);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("broken.pgm") != std::string::npos);
  }
  const Dataset skipped = ingest(root, true);
  CHECK(skipped.items.size() == 5);
  CHECK(skipped.skipped.size() == 1);

  CHECK_THROWS_AS(ingest(root / "nowhere"), IoError);
  fs::remove_all(root);
}

TEST_CASE("synthetic corpus") {
  const fs::path a = fresh_dir("syn_a"), b = fresh_dir("syn_b");
  const Dataset da = gen_synthetic(10, 16, 42, a), db = gen_synthetic(10, 16, 42, b);
  CHECK(da.items.size() == 20);
  CHECK(da.count(Label::benign) == 10);
  for (std::size_t i = 0; i < da.items.size(); ++i) {
    CHECK(file_checksum(da.items[i].path) == file_checksum(db.items[i].path));
  }
  CHECK(synthetic_samples(3, 16, 1)[0].image != synthetic_samples(3, 16, 2)[0].image);
  CHECK_THROWS_AS(synthetic_samples(0, 16, 1), ShapeError);
  CHECK_THROWS_AS(synthetic_samples(1, 8, 1), ShapeError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("geometric transforms") {
  const Image img = pattern(4, 4);
  using Op = GeometricOp;
  for (auto axis : {Op::Axis::horizontal, Op::Axis::vertical}) {
    CHECK(geometric_augment(geometric_augment(img, Op::flip(axis)), Op::flip(axis)) == img);
  }
  const Image h = geometric_augment(img, Op::flip(Op::Axis::horizontal));
  CHECK(h(1, 0) == img(1, 3));

  // counter-clockwise quarter turn as an index permutation
  const Image r = geometric_augment(img, Op::rotate(90));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(r(i, j) - img(j, 3 - i)) < 1e-12);

  Rng rng(5);
  const Image lesion = synthetic_lesion(16, Label::malignant, rng);
  auto mae = [](const Image& a, const Image& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.pixels()[i] - b.pixels()[i]);
    return s / static_cast<double>(a.size());
  };
  CHECK(mae(geometric_augment(lesion, Op::rotate(360)), lesion) < 1e-6);
  Image turned = lesion;
  for (int k = 0; k < 4; ++k) turned = geometric_augment(turned, Op::rotate(90));
  CHECK(mae(turned, lesion) < 1e-6);
  CHECK(mae(geometric_augment(lesion, Op::scale(1.0)), lesion) < 1e-12);
  CHECK(mae(geometric_augment(lesion, Op::rotate(30)), lesion) > 1e-3);

  CHECK(default_geometric_ops().size() == 5);
  CHECK(Op::parse("rotate:90").to_string() == "rotate:90");
  CHECK(Op::parse("flip:v").axis == Op::Axis::vertical);
  CHECK_THROWS_AS(Op::parse("scale:0"), ShapeError);
  CHECK_THROWS_AS(Op::parse("shear:3"), ShapeError);
}

TEST_CASE("configuration") {
  PipelineConfig c;
  const auto m = c.to_map();
  CHECK(m.size() == PipelineConfig::keys().size());
  PipelineConfig d;
  for (const auto& [k, v] : m) d.set(k, v);
  CHECK(d.to_map() == m);
  CHECK(std::stod(m.at("train.learning_rate")) == 1e-4);
  CHECK(m.at("train.batch_size") == "32");

  apply_config_text(d, "# comment\n train.epochs = 5  # trailing\nstage.benchmark=false\nsrad.region = 1,2,3,4\n");
  CHECK(d.train.epochs == 5);
  CHECK_FALSE(d.stages.benchmark);
  REQUIRE(d.srad.region.has_value());
  CHECK(d.srad.region->w == 3);
  CHECK_THROWS_AS(d.set("train.epoch", "3"), ShapeError);
  CHECK_THROWS_AS(d.set("train.epochs", "three"), ShapeError);
  CHECK_THROWS_AS(apply_config_text(d, "novalue\n"), ShapeError);

  PipelineConfig bad;
  bad.stages.train = false;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("pipeline with every stage disabled") {
  const fs::path out = fresh_dir("none");
  PipelineConfig c;
  c.output = out;
  c.stages = {false, false, false, false, false, false};
  const auto rep = run_pipeline(c);
  CHECK(rep.stages_run.empty());
  CHECK(fs::exists(out / "manifest.txt"));
  CHECK_FALSE(fs::exists(out / "data"));
  fs::remove_all(out);
}

TEST_CASE("denoise-only run on one image") {
  const fs::path in = fresh_dir("one_in"), out = fresh_dir("one_out");
  fs::create_directories(in / "benign");
  fs::create_directories(in / "malignant");
  Rng rng(1);
  write_pgm(synthetic_lesion(16, Label::benign, rng), in / "benign" / "x.pgm");
  PipelineConfig c;
  c.output = out;
  c.input = in;
  c.split = {1.0, 0.0, 0.0};
  c.stages = {true, false, false, false, false, false};
  const auto rep = run_pipeline(c);
  CHECK(rep.stages_run == std::vector<std::string>{"dataset", "denoise"});
  std::size_t scales = 0;
  for (const auto& [k, v] : rep.entries) scales += k == "artifact" && v.find("denoised/") == 0;
  CHECK(scales == 8);
  fs::remove_all(in);
  fs::remove_all(out);
}

TEST_CASE("full pipeline is reproducible and complete") {
  const fs::path out = fresh_dir("full");
  const PipelineConfig c = tiny_config(out);
  const auto rep = run_pipeline(c);
  CHECK(rep.stages_run ==
        std::vector<std::string>{"dataset", "denoise", "augment", "explain", "train", "evaluate", "benchmark"});
  REQUIRE(rep.pre.has_value());
  REQUIRE(rep.post.has_value());
  CHECK(rep.pre->matrix.total() == 2);
  REQUIRE(rep.scaling.has_value());

  std::size_t outputs = 0, expected = 0, artifacts = 0;
  bool scaling_line = false, post_accuracy = false;
  for (const auto& [k, v] : rep.entries) {
    if (k == "augment.outputs") outputs = std::stoul(v);
    if (k == "augment.expected") expected = std::stoul(v);
    if (k == "metrics.post.accuracy") post_accuracy = true;
    if (k == "artifact") {
      ++artifacts;
      CHECK(fs::exists(out / v.substr(0, v.find(' '))));
    }
  }
  // 2 training images per class, 2 references: 3 combinations each
  CHECK(outputs == 12);
  CHECK(expected == 12);
  CHECK(artifacts > 12);
  CHECK(post_accuracy);
  std::ifstream man(rep.manifest);
  std::string line;
  while (std::getline(man, line)) scaling_line = scaling_line || line.rfind("timing.scaling", 0) == 0;
  CHECK(scaling_line);

  const std::string first = manifest_without_timing(rep.manifest);
  run_pipeline(c);
  CHECK(manifest_without_timing(rep.manifest) == first);
  fs::remove_all(out);
}

TEST_CASE("stage failures name the stage") {
  const fs::path out = fresh_dir("fail");
  PipelineConfig c = tiny_config(out);
  c.input = out / "missing";
  try {
    run_pipeline(c);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.stage == "dataset");
  }
  CHECK(manifest_without_timing(out / "manifest.txt").find("failed dataset") != std::string::npos);
  fs::remove_all(out);
}
