#include "nstaug/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace nstaug {

namespace fs = std::filesystem;

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::original: return "original";
    case Provenance::augmented: return "augmented";
    case Provenance::denoised: return "denoised";
  }
  return "original";
}

std::size_t Dataset::count(Label l) const {
  return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [&](const auto& i) { return i.label == l; }));
}

std::vector<Label> Dataset::labels() const {
  std::vector<Label> out;
  for (const auto& i : items) out.push_back(i.label);
  return out;
}

std::vector<Sample> Dataset::load() const {
  std::vector<Sample> out;
  for (const auto& i : items) out.push_back({fs::relative(i.path, root).generic_string(), read_pgm(i.path), i.label});
  return out;
}

Dataset ingest(const fs::path& root, bool skip_bad) {
  Dataset ds;
  ds.root = root;
  std::vector<std::string> bad;
  for (Label l : {Label::benign, Label::malignant}) {
    const fs::path dir = root / label_name(l);
    if (!fs::is_directory(dir)) throw IoError(root.string() + ": missing " + label_name(l) + "/ directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      try {
        read_pgm(f).validate();
        ds.items.push_back({f, l});
      } catch (const std::exception& e) {
        bad.push_back(f.string() + " (" + e.what() + ")");
      }
    }
  }
  if (!bad.empty() && !skip_bad) {
    std::string msg = "undecodable files (use --skip-bad to continue without them):";
    for (const auto& b : bad) msg += "\n  " + b;
    throw IoError(msg);
  }
  ds.skipped = std::move(bad);
  return ds;
}

std::vector<Sample> synthetic_samples(std::size_t per_class, std::size_t size, std::uint64_t seed) {
  if (per_class < 1) throw ShapeError("synthetic corpus: need at least one image per class");
  if (size < 16) throw ShapeError("synthetic corpus: image side must be >= 16");
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (Label l : {Label::benign, Label::malignant}) {
      std::ostringstream id;
      id << label_name(l) << '/' << label_name(l) << '_' << std::setw(4) << std::setfill('0') << i << ".pgm";
      out.push_back({id.str(), synthetic_lesion(size, l, rng), l});
    }
  }
  return out;
}

Dataset gen_synthetic(std::size_t per_class, std::size_t size, std::uint64_t seed, const fs::path& root) {
  const auto samples = synthetic_samples(per_class, size, seed);
  for (Label l : {Label::benign, Label::malignant}) ensure_writable_dir(root / label_name(l));
  for (const auto& s : samples) write_pgm(s.image, root / s.id);
  return ingest(root);
}

GeometricOp GeometricOp::rotate(double degrees) { return {Kind::rotate, degrees, Axis::horizontal}; }

GeometricOp GeometricOp::scale(double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) throw ShapeError("scale factor must be > 0");
  return {Kind::scale, factor, Axis::horizontal};
}

GeometricOp GeometricOp::flip(Axis axis) { return {Kind::flip, 0.0, axis}; }

GeometricOp GeometricOp::parse(const std::string& s) {
  const auto colon = s.find(':');
  const std::string kind = s.substr(0, colon), arg = colon == std::string::npos ? "" : s.substr(colon + 1);
  try {
    if (kind == "rotate") return rotate(std::stod(arg));
    if (kind == "scale") return scale(std::stod(arg));
  } catch (const std::invalid_argument&) {
    throw ShapeError("geometric op '" + s + "': bad number");
  }
  if (kind == "flip" && (arg == "h" || arg == "horizontal")) return flip(Axis::horizontal);
  if (kind == "flip" && (arg == "v" || arg == "vertical")) return flip(Axis::vertical);
  throw ShapeError("geometric op '" + s + "': expected rotate:<deg>, scale:<s>, flip:h or flip:v");
}

std::string GeometricOp::to_string() const {
  std::ostringstream o;
  switch (kind) {
    case Kind::rotate: o << "rotate:" << value; break;
    case Kind::scale: o << "scale:" << value; break;
    case Kind::flip: o << "flip:" << (axis == Axis::horizontal ? "h" : "v"); break;
  }
  return o.str();
}

namespace {

double bilinear(const Image& img, double y, double x) {
  const double y0 = std::floor(y), x0 = std::floor(x);
  const double fy = y - y0, fx = x - x0;
  auto px = [&](double yy, double xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<double>(img.height()) || xx >= static_cast<double>(img.width())) {
      return 0.0;
    }
    return img(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
  };
  double v = 0.0;
  if (fy < 1.0 && fx < 1.0) v += (1 - fy) * (1 - fx) * px(y0, x0);
  if (fy > 0.0 && fx < 1.0) v += fy * (1 - fx) * px(y0 + 1, x0);
  if (fy < 1.0 && fx > 0.0) v += (1 - fy) * fx * px(y0, x0 + 1);
  if (fy > 0.0 && fx > 0.0) v += fy * fx * px(y0 + 1, x0 + 1);
  return v;
}

}  // namespace

Image geometric_augment(const Image& image, const GeometricOp& op) {
  const std::size_t h = image.height(), w = image.width();
  if (h == 0 || w == 0) throw ShapeError("geometric transform of an empty image");
  Image out(h, w);
  if (op.kind == GeometricOp::Kind::flip) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out(y, x) = op.axis == GeometricOp::Axis::horizontal ? image(y, w - 1 - x) : image(h - 1 - y, x);
    return out;
  }
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  double c = 1.0, s = 0.0, inv = 1.0;
  if (op.kind == GeometricOp::Kind::rotate) {
    const double turns = op.value / 90.0;
    if (turns == std::round(turns)) {
      const long q = ((static_cast<long>(std::round(turns)) % 4) + 4) % 4;
      const double cq[4] = {1, 0, -1, 0}, sq[4] = {0, 1, 0, -1};
      c = cq[q];
      s = sq[q];
    } else {
      c = std::cos(op.value * std::numbers::pi / 180.0);
      s = std::sin(op.value * std::numbers::pi / 180.0);
    }
  } else {
    if (!(op.value > 0.0)) throw ShapeError("scale factor must be > 0");
    inv = 1.0 / op.value;
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double sx = cx + inv * (c * dx - s * dy);
      const double sy = cy + inv * (s * dx + c * dy);
      out(y, x) = std::clamp(bilinear(image, sy, sx), 0.0, 1.0);
    }
  }
  return out;
}

std::vector<GeometricOp> default_geometric_ops() {
  return {GeometricOp::rotate(90), GeometricOp::rotate(180), GeometricOp::rotate(270), GeometricOp::scale(1.25),
          GeometricOp::flip(GeometricOp::Axis::horizontal)};
}

// ---------------------------------------------------------------------------
// configuration

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

double parse_double(const std::string& k, const std::string& v) {
  double d = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), d);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ShapeError(k + ": expected a number, got '" + v + "'");
  return d;
}

std::uint64_t parse_u64(const std::string& k, const std::string& v) {
  std::uint64_t d = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), d);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ShapeError(k + ": expected a nonnegative integer, got '" + v + "'");
  }
  return d;
}

std::size_t parse_size(const std::string& k, const std::string& v) { return static_cast<std::size_t>(parse_u64(k, v)); }

bool parse_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ShapeError(k + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& k, const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  std::string tok;
  while (std::getline(in, tok, ',')) out.push_back(parse_size(k, tok));
  if (out.empty()) throw ShapeError(k + ": empty list");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::string name;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

#define NSTAUG_FIELD(key, expr, parse) \
  Field { key, [&c] { return fmt(c.expr); }, [&c](const std::string& v) { c.expr = parse(key, v); } }

std::vector<Field> fields(PipelineConfig& c) {
  return {
      Field{"seed", [&c] { return fmt(c.seed, 0); }, [&c](const std::string& v) { c.seed = parse_u64("seed", v); }},
      Field{"output", [&c] { return c.output.string(); }, [&c](const std::string& v) { c.output = v; }},
      Field{"input", [&c] { return c.input.string(); }, [&c](const std::string& v) { c.input = v; }},
      NSTAUG_FIELD("synthetic.per_class", synthetic_per_class, parse_size),
      NSTAUG_FIELD("synthetic.size", synthetic_size, parse_size),
      NSTAUG_FIELD("split.train", split.train, parse_double),
      NSTAUG_FIELD("split.val", split.val, parse_double),
      NSTAUG_FIELD("split.test", split.test, parse_double),
      NSTAUG_FIELD("stage.denoise", stages.denoise, parse_bool),
      NSTAUG_FIELD("stage.augment", stages.augment, parse_bool),
      NSTAUG_FIELD("stage.explain", stages.explain, parse_bool),
      NSTAUG_FIELD("stage.train", stages.train, parse_bool),
      NSTAUG_FIELD("stage.evaluate", stages.evaluate, parse_bool),
      NSTAUG_FIELD("stage.benchmark", stages.benchmark, parse_bool),
      NSTAUG_FIELD("workers", workers, parse_size),
      NSTAUG_FIELD("srad.scales", srad.scales, parse_size),
      NSTAUG_FIELD("srad.iterations", srad.iterations_per_scale, parse_size),
      NSTAUG_FIELD("srad.dt", srad.dt, parse_double),
      Field{"srad.region",
            [&c] {
              if (!c.srad.region) return std::string("none");
              const Region& r = *c.srad.region;
              return join({r.x, r.y, r.w, r.h});
            },
            [&c](const std::string& v) {
              if (v == "none" || v.empty()) {
                c.srad.region.reset();
              } else {
                c.srad.region = Region::parse(v);
              }
            }},
      NSTAUG_FIELD("nst.iterations", nst.iterations, parse_size),
      NSTAUG_FIELD("nst.alpha", nst.weights.alpha, parse_double),
      NSTAUG_FIELD("nst.beta", nst.weights.beta, parse_double),
      NSTAUG_FIELD("nst.gamma_beta_prime", nst.weights.gamma_beta_prime, parse_double),
      NSTAUG_FIELD("nst.layer_weight", nst.layer_weight, parse_double),
      NSTAUG_FIELD("nst.initial_step", nst.initial_step, parse_double),
      NSTAUG_FIELD("nst.refs", nst_refs, parse_size),
      NSTAUG_FIELD("nst.bins", augment.bins, parse_size),
      Field{"nst.init", [&c] { return std::string(c.nst.init == InitMode::noise ? "noise" : "content"); },
            [&c](const std::string& v) {
              if (v == "noise") {
                c.nst.init = InitMode::noise;
              } else if (v == "content") {
                c.nst.init = InitMode::content_copy;
              } else {
                throw ShapeError("nst.init: expected content or noise");
              }
            }},
      Field{"nst.policy", [&c] { return to_string(c.augment.policy); },
            [&c](const std::string& v) { c.augment.policy = parse_combination_policy(v); }},
      Field{"nst.histogram", [&c] { return std::string(c.augment.mode == HistogramMode::match ? "match" : "identity"); },
            [&c](const std::string& v) {
              if (v == "match") {
                c.augment.mode = HistogramMode::match;
              } else if (v == "identity") {
                c.augment.mode = HistogramMode::identity;
              } else {
                throw ShapeError("nst.histogram: expected match or identity");
              }
            }},
      NSTAUG_FIELD("augment.geometric", geometric, parse_bool),
      NSTAUG_FIELD("lrp.alpha", lrp.alpha, parse_double),
      NSTAUG_FIELD("lrp.beta", lrp.beta, parse_double),
      NSTAUG_FIELD("lrp.epsilon", lrp.epsilon, parse_double),
      Field{"lrp.degenerate",
            [&c] {
              switch (c.lrp.degenerate) {
                case DegenerateRule::error: return std::string("error");
                case DegenerateRule::absorb: return std::string("absorb");
                case DegenerateRule::fold: return std::string("fold");
              }
              return std::string("error");
            },
            [&c](const std::string& v) { c.lrp.degenerate = parse_degenerate_rule(v); }},
      Field{"lrp.pool", [&c] { return std::string(c.lrp.pool == PoolRule::uniform ? "uniform" : "proportional"); },
            [&c](const std::string& v) { c.lrp.pool = parse_pool_rule(v); }},
      NSTAUG_FIELD("lrp.images", explain_images, parse_size),
      NSTAUG_FIELD("train.epochs", train.epochs, parse_size),
      NSTAUG_FIELD("train.patience", train.patience, parse_size),
      NSTAUG_FIELD("train.learning_rate", train.learning_rate, parse_double),
      NSTAUG_FIELD("train.momentum", train.momentum, parse_double),
      NSTAUG_FIELD("train.plateau_factor", train.plateau_factor, parse_double),
      NSTAUG_FIELD("train.plateau_patience", train.plateau_patience, parse_size),
      NSTAUG_FIELD("train.min_learning_rate", train.min_learning_rate, parse_double),
      NSTAUG_FIELD("train.batch_size", train.batch_size, parse_size),
      NSTAUG_FIELD("train.dropout", train.dropout, parse_double),
      Field{"benchmark.workers", [&c] { return join(c.benchmark_workers); },
            [&c](const std::string& v) { c.benchmark_workers = parse_list("benchmark.workers", v); }},
      NSTAUG_FIELD("benchmark.images", benchmark_images, parse_size),
  };
}

#undef NSTAUG_FIELD

}  // namespace

PipelineConfig::PipelineConfig() {
  nst.iterations = 200;
  nst.weights.gamma_beta_prime = 100.0;
}

void PipelineConfig::validate() const {
  split.validate();
  if (stages.evaluate && !stages.train) throw ShapeError("stage.evaluate requires stage.train");
  if (workers < 1) throw ShapeError("workers must be >= 1");
  if (input.empty() && (synthetic_per_class < 1 || synthetic_size < 16)) {
    throw ShapeError("synthetic corpus needs per_class >= 1 and size >= 16");
  }
  if (srad.iterations_per_scale < 1 || srad.scales < 1 || !(srad.dt > 0.0 && srad.dt <= 0.25)) {
    throw ShapeError("srad: iterations and scales must be >= 1, dt in (0, 0.25]");
  }
  nst.validate();
  if (nst_refs < 1) throw ShapeError("nst.refs must be >= 1");
  lrp.validate();
  train.validate();
  for (std::size_t w : benchmark_workers) {
    if (w < 1) throw ShapeError("benchmark.workers entries must be >= 1");
  }
  if (benchmark_images < 1) throw ShapeError("benchmark.images must be >= 1");
}

std::map<std::string, std::string> PipelineConfig::to_map() const {
  PipelineConfig copy = *this;
  std::map<std::string, std::string> m;
  for (const auto& f : fields(copy)) m[f.name] = f.get();
  return m;
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  for (auto& f : fields(*this)) {
    if (f.name == key) {
      f.set(value);
      return;
    }
  }
  throw ShapeError("unknown configuration key '" + key + "'");
}

std::vector<std::string> PipelineConfig::keys() {
  PipelineConfig c;
  std::vector<std::string> out;
  for (const auto& f : fields(c)) out.push_back(f.name);
  return out;
}

void apply_config_text(PipelineConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ShapeError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ShapeError& e) {
      throw ShapeError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  PipelineConfig cfg;
  apply_config_text(cfg, text.str(), path.string());
  return cfg;
}

std::uint64_t file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string manifest_without_timing(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read " + manifest.string());
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind("timing.", 0) == 0) continue;
    out += line + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// pipeline

namespace {

using Clock = std::chrono::steady_clock;

std::string hex(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

std::string stem(const std::string& id) { return fs::path(id).stem().string(); }

class Run {
 public:
  Run(const PipelineConfig& cfg, RunReport& rep) : cfg_(cfg), rep_(rep) {}

  void artifact(const fs::path& p) {
    rep_.add("artifact", fs::relative(p, cfg_.output).generic_string() + " " + hex(file_checksum(p)));
  }

  template <typename F>
  void stage(const std::string& name, F&& body) {
    const auto t0 = Clock::now();
    try {
      body();
    } catch (const PipelineError&) {
      throw;
    } catch (const std::exception& e) {
      rep_.add("failed", name);
      write_manifest();
      throw PipelineError(name, e.what());
    }
    rep_.stages_run.push_back(name);
    rep_.add("stage", name);
    timings_.emplace_back(name, std::chrono::duration<double>(Clock::now() - t0).count());
  }

  void write_manifest() {
    std::ofstream out(rep_.manifest);
    if (!out) throw IoError("cannot write " + rep_.manifest.string());
    out << "# nstaug run manifest\n";
    out << "# lines starting with \"timing.\" hold wall-clock values and are excluded from determinism checks\n";
    for (const auto& [k, v] : rep_.entries) out << k << ' ' << v << '\n';
    for (const auto& [k, v] : timings_) out << "timing." << k << "_seconds " << fmt(v) << '\n';
    for (const auto& l : timing_lines_) out << "timing." << l << '\n';
  }

  void timing_line(const std::string& l) { timing_lines_.push_back(l); }

 private:
  const PipelineConfig& cfg_;
  RunReport& rep_;
  std::vector<std::pair<std::string, double>> timings_;
  std::vector<std::string> timing_lines_;
};

std::string ids_of(const std::vector<Sample>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + s[i].id;
  return out.empty() ? "-" : out;
}

void add_metrics(RunReport& rep, const std::string& prefix, const MetricsReport& m) {
  rep.add(prefix + ".confusion", "tn=" + std::to_string(m.matrix.tn) + " fp=" + std::to_string(m.matrix.fp) +
                                     " fn=" + std::to_string(m.matrix.fn) + " tp=" + std::to_string(m.matrix.tp));
  const std::pair<const char*, const std::optional<double>*> items[] = {{"accuracy", &m.accuracy},
                                                                        {"recall", &m.recall},
                                                                        {"specificity", &m.specificity},
                                                                        {"precision", &m.precision},
                                                                        {"f1", &m.f1}};
  for (const auto& [name, v] : items) rep.add(prefix + "." + name, *v ? fmt(**v) : std::string("undefined"));
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

}  // namespace

RunReport run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  ensure_writable_dir(cfg.output);
  RunReport rep;
  rep.manifest = cfg.output / "manifest.txt";
  Run run(cfg, rep);
  for (const auto& [k, v] : cfg.to_map()) rep.add("config." + k, v);

  const StageToggles& st = cfg.stages;
  const bool any = st.denoise || st.augment || st.explain || st.train || st.evaluate || st.benchmark;
  if (!any) {
    run.write_manifest();
    return rep;
  }

  // dataset and split; the split happens before any augmentation so no
  // derivative of a validation or test image reaches training
  std::vector<Sample> train, val, test;
  run.stage("dataset", [&] {
    Dataset ds;
    if (cfg.input.empty()) {
      ds = gen_synthetic(cfg.synthetic_per_class, cfg.synthetic_size, cfg.seed, cfg.output / "data");
    } else {
      ds = ingest(cfg.input);
    }
    rep.add("dataset.benign", std::to_string(ds.count(Label::benign)));
    rep.add("dataset.malignant", std::to_string(ds.count(Label::malignant)));
    const auto samples = ds.load();
    const auto split = split_dataset(ds.labels(), cfg.split, cfg.seed);
    for (auto i : split.train) train.push_back(samples[i]);
    for (auto i : split.val) val.push_back(samples[i]);
    for (auto i : split.test) test.push_back(samples[i]);
    rep.add("split.train", std::to_string(train.size()) + " " + ids_of(train));
    rep.add("split.val", std::to_string(val.size()) + " " + ids_of(val));
    rep.add("split.test", std::to_string(test.size()) + " " + ids_of(test));
  });

  if (st.denoise) {
    run.stage("denoise", [&] {
      const fs::path dir = cfg.output / "denoised";
      ensure_writable_dir(dir);
      std::vector<Sample*> all;
      for (auto* part : {&train, &val, &test})
        for (auto& s : *part) all.push_back(&s);
      std::vector<std::vector<fs::path>> written(all.size());
      parallel_for_shards(cfg.workers, all.size(), [&](std::size_t i) {
        const auto scales = srad_multiscale(all[i]->image, cfg.srad);
        const std::string base = label_name(all[i]->label) + std::string("_") + stem(all[i]->id);
        for (std::size_t k = 0; k < scales.size(); ++k) {
          written[i].push_back(dir / (base + "_s" + std::to_string(k + 1) + ".pgm"));
          write_pgm(scales[k], written[i].back());
        }
        all[i]->image = read_pgm(written[i].back());
      });
      rep.add("denoise.images", std::to_string(all.size()));
      rep.add("denoise.scales", std::to_string(cfg.srad.scales));
      for (const auto& w : written)
        for (const auto& p : w) run.artifact(p);
    });
  }

  const Network feat = build_network(default_feature_layers(), cfg.seed);
  std::vector<Sample> augmented;
  std::vector<AugmentRecord> aug_records;
  if (st.augment) {
    run.stage("augment", [&] {
      std::size_t expected = 0;
      for (Label l : {Label::benign, Label::malignant}) {
        std::vector<NamedImage> contents;
        for (const auto& s : train) {
          if (s.label == l) contents.push_back({s.id, s.image});
        }
        if (contents.empty()) continue;
        std::vector<std::size_t> order(contents.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng pick = Rng::derive(cfg.seed, 100 + static_cast<std::uint64_t>(l));
        pick.shuffle(order.begin(), order.end());
        std::vector<NamedImage> refs;
        for (std::size_t i = 0; i < std::min(cfg.nst_refs, order.size()); ++i) refs.push_back(contents[order[i]]);
        NstConfig nc = cfg.nst;
        nc.seed = Rng::derive(cfg.seed, 200 + static_cast<std::uint64_t>(l)).next_u64();
        AugmentOptions opts = cfg.augment;
        opts.workers = cfg.workers;
        const fs::path dir = cfg.output / "augmented" / label_name(l);
        const auto man = augment_batch(contents, refs, feat, nc, dir, opts);
        expected += contents.size() * style_combinations(refs.size(), opts.policy).size();
        std::string ref_ids;
        for (const auto& r : refs) ref_ids += (ref_ids.empty() ? "" : ",") + r.id;
        rep.add(std::string("augment.") + label_name(l) + ".refs", ref_ids);
        rep.add(std::string("augment.") + label_name(l) + ".combinations", std::to_string(man.combinations));
        for (const auto& r : man.records) {
          augmented.push_back({fs::relative(r.output, cfg.output).generic_string(), read_pgm(r.output), l});
          aug_records.push_back(r);
          run.artifact(r.output);
          run.artifact(r.trace);
          rep.add("augment.final_loss", fs::relative(r.output, cfg.output).generic_string() + " " + fmt(r.final_loss));
        }
        run.artifact(dir / "manifest.txt");
      }
      if (cfg.geometric) {
        const fs::path dir = cfg.output / "geometric";
        ensure_writable_dir(dir);
        const auto ops = default_geometric_ops();
        for (const auto& s : train) {
          for (std::size_t k = 0; k < ops.size(); ++k) {
            const fs::path p = dir / (label_name(s.label) + std::string("_") + stem(s.id) + "_g" + std::to_string(k) + ".pgm");
            write_pgm(geometric_augment(s.image, ops[k]), p);
            augmented.push_back({fs::relative(p, cfg.output).generic_string(), read_pgm(p), s.label});
            run.artifact(p);
          }
        }
        expected += train.size() * ops.size();
      }
      rep.add("augment.outputs", std::to_string(augmented.size()));
      rep.add("augment.expected", std::to_string(expected));
      if (augmented.size() != expected) throw ShapeError("augmented count differs from the combination arithmetic");
    });
  }

  if (st.explain) {
    run.stage("explain", [&] {
      const fs::path dir = cfg.output / "explain";
      ensure_writable_dir(dir);
      const LayerId content = feat.find(cfg.nst.content_layer);
      const std::size_t n = std::min(cfg.explain_images, aug_records.empty() ? train.size() : aug_records.size());
      for (std::size_t i = 0; i < n; ++i) {
        RelevanceMap m;
        std::string name;
        if (!aug_records.empty()) {
          const auto& r = aug_records[i];
          const Image out = read_pgm(r.output);
          const auto src = std::find_if(train.begin(), train.end(), [&](const Sample& s) { return s.id == r.source; });
          if (src == train.end()) throw ShapeError("no training image named " + r.source);
          const Tensor ref = feat.forward(src->image.to_tensor()).outputs[content];
          m = propagate(feat, out, LrpTarget::content_loss(content, ref), cfg.lrp);
          name = r.output.stem().string();
        } else {
          m = propagate(feat, train[i].image, LrpTarget::layer_sum(feat.find("stage4")), cfg.lrp);
          name = label_name(train[i].label) + std::string("_") + stem(train[i].id);
        }
        const fs::path p = dir / (name + ".ppm");
        render_heatmap(m, std::nullopt, p);
        run.artifact(p);
        run.artifact(fs::path(p.string() + ".txt"));
        rep.add("explain." + name, "f=" + fmt(m.output) + " max_relative_gap=" + fmt(m.max_relative_gap()) +
                                       " degenerate=" + std::to_string(m.degenerate_neurons));
      }
    });
  }

  std::optional<TrainResult> pre, post;
  if (st.train) {
    run.stage("train", [&] {
      pre = train_head(train, val, cfg.train);
      const fs::path pm = cfg.output / "model_pre.wts", ph = cfg.output / "history_pre.txt";
      save_weights(pre->model.to_network(), pm);
      write_text(ph, pre->history.to_text());
      run.artifact(pm);
      run.artifact(ph);
      rep.add("train.pre.samples", std::to_string(train.size()));
      rep.add("train.pre.best_epoch", std::to_string(pre->history.best_epoch));
      if (!augmented.empty()) {
        std::vector<Sample> both = train;
        both.insert(both.end(), augmented.begin(), augmented.end());
        post = train_head(both, val, cfg.train);
        const fs::path qm = cfg.output / "model_post.wts", qh = cfg.output / "history_post.txt";
        save_weights(post->model.to_network(), qm);
        write_text(qh, post->history.to_text());
        run.artifact(qm);
        run.artifact(qh);
        rep.add("train.post.samples", std::to_string(both.size()));
        rep.add("train.post.best_epoch", std::to_string(post->history.best_epoch));
      }
    });
  }

  if (st.evaluate) {
    run.stage("evaluate", [&] {
      rep.pre = evaluate(pre->model, test);
      add_metrics(rep, "metrics.pre", *rep.pre);
      write_text(cfg.output / "metrics_pre.txt", rep.pre->to_text());
      run.artifact(cfg.output / "metrics_pre.txt");
      if (post) {
        rep.post = evaluate(post->model, test);
        add_metrics(rep, "metrics.post", *rep.post);
        rep.delta = compare_pre_post(*rep.pre, *rep.post);
        for (const auto& d : rep.delta->metrics) {
          rep.add("metrics.delta." + d.name, d.delta ? fmt(*d.delta) : std::string("undefined"));
        }
        write_text(cfg.output / "metrics_post.txt", rep.post->to_text());
        write_text(cfg.output / "metrics_delta.txt", rep.delta->to_text());
        run.artifact(cfg.output / "metrics_post.txt");
        run.artifact(cfg.output / "metrics_delta.txt");
      }
      rep.add("reference.accuracy", "pre=" + fmt(kReferencePreAccuracy) + " post=" + fmt(kReferencePostAccuracy) +
                                        " unverified");
    });
  }

  if (st.benchmark) {
    run.stage("benchmark", [&] {
      std::vector<NamedImage> contents, refs;
      for (std::size_t i = 0; i < std::min(cfg.benchmark_images, train.size()); ++i) {
        contents.push_back({train[i].id, train[i].image});
      }
      for (std::size_t i = 0; i < std::min<std::size_t>(2, train.size()); ++i) {
        refs.push_back({train[train.size() - 1 - i].id, train[train.size() - 1 - i].image});
      }
      const fs::path dir = cfg.output / "benchmark";
      rep.scaling = speedup_benchmark(
          [&](std::size_t w) {
            AugmentOptions opts = cfg.augment;
            opts.workers = w;
            augment_batch(contents, refs, feat, cfg.nst, dir / ("w" + std::to_string(w)), opts);
          },
          cfg.benchmark_workers, "augment");
      rep.add("benchmark.workload", "augment contents=" + std::to_string(contents.size()) +
                                        " refs=" + std::to_string(refs.size()));
      rep.add("benchmark.workers", join(cfg.benchmark_workers));
      std::istringstream table(format_scaling_table(*rep.scaling));
      std::string line;
      while (std::getline(table, line)) run.timing_line("scaling " + line);
      write_text(cfg.output / "scaling.txt", format_scaling_table(*rep.scaling));
    });
  }

  run.write_manifest();
  return rep;
}

}  // namespace nstaug
