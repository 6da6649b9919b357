#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nstaug/pipeline.hpp"

using namespace nstaug;
namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> parse_workers(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(tok, &pos);
    if (pos != tok.size() || v == 0) throw ShapeError("--workers: expected a list like 1,2,4,8");
    out.push_back(v);
  }
  if (out.empty()) throw ShapeError("--workers: empty list");
  return out;
}

std::vector<NamedImage> load_images(const std::vector<std::string>& args) {
  std::vector<NamedImage> out;
  for (const auto& a : args) {
    if (fs::is_directory(a)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(a)) {
        if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) out.push_back({f.string(), read_pgm(f)});
    } else {
      out.push_back({a, read_pgm(a)});
    }
  }
  return out;
}

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
  cmd->add_option("--epochs", t.epochs, "Maximum epochs")->capture_default_str();
  cmd->add_option("--patience", t.patience, "Early-stopping patience in epochs")->capture_default_str();
  cmd->add_option("--learning-rate", t.learning_rate, "Initial learning rate")->capture_default_str();
  cmd->add_option("--momentum", t.momentum, "SGD momentum")->capture_default_str();
  cmd->add_option("--plateau-factor", t.plateau_factor, "Learning-rate factor on plateau")->capture_default_str();
  cmd->add_option("--plateau-patience", t.plateau_patience, "Epochs without improvement before a reduction")
      ->capture_default_str();
  cmd->add_option("--min-learning-rate", t.min_learning_rate, "Learning-rate floor")->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size, "Mini-batch size")->capture_default_str();
  cmd->add_option("--dropout", t.dropout, "Dropout rate, 0 disables")->capture_default_str();
}

struct SplitFlags {
  std::uint64_t seed = 1;
  SplitRatios ratios;
};

void add_split_flags(CLI::App* cmd, SplitFlags& s) {
  cmd->add_option("--seed", s.seed, "Seed for the split and the weights")->capture_default_str();
  cmd->add_option("--split-train", s.ratios.train, "Training fraction")->capture_default_str();
  cmd->add_option("--split-val", s.ratios.val, "Validation fraction")->capture_default_str();
  cmd->add_option("--split-test", s.ratios.test, "Test fraction")->capture_default_str();
}

std::vector<Sample> pick(const std::vector<Sample>& all, const std::vector<std::size_t>& idx) {
  std::vector<Sample> out;
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

void print_metrics(const MetricsReport& m) { std::cout << m.to_text(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style-transfer data augmentation toolkit for two-class ultrasound corpora"};
  app.require_subcommand(1);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write a seeded two-class synthetic corpus");
  std::size_t gen_n = 20, gen_size = 16;
  std::uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("--per-class", gen_n, "Images per class")->capture_default_str();
  gen->add_option("--size", gen_size, "Image side in pixels")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Corpus seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output root (benign/ and malignant/ are created)")->required();

  // ingest
  auto* ing = app.add_subcommand("ingest", "List a corpus and report per-class counts");
  std::string ing_root;
  bool ing_skip = false;
  ing->add_option("root", ing_root, "Directory with benign/ and malignant/")->required();
  ing->add_flag("--skip-bad", ing_skip, "Leave undecodable files out instead of aborting");

  // denoise
  auto* den = app.add_subcommand("denoise", "Multiscale speckle-reducing diffusion of one image");
  std::string den_in, den_prefix, den_region;
  SradParams srad;
  den->add_option("input", den_in, "Input PGM")->required();
  den->add_option("out-prefix", den_prefix, "Outputs are <prefix>_s<k>.pgm")->required();
  den->add_option("--scales", srad.scales, "Number of output scales")->capture_default_str();
  den->add_option("--iters", srad.iterations_per_scale, "Iterations per scale")->capture_default_str();
  den->add_option("--dt", srad.dt, "Time step, at most 0.25")->capture_default_str();
  den->add_option("--region", den_region, "Homogeneous region x,y,w,h (default: whole image)");

  // augment
  auto* aug = app.add_subcommand("augment", "Stylize content images with every reference combination");
  std::vector<std::string> aug_content, aug_refs;
  std::string aug_out, aug_policy = "singles+full", aug_hist = "match", aug_init = "content";
  NstConfig nst;
  nst.iterations = 200;
  nst.weights.gamma_beta_prime = 100.0;
  AugmentOptions aug_opts;
  std::uint64_t net_seed = 1;
  aug->add_option("--content", aug_content, "Content PGM files or directories")->required();
  aug->add_option("--refs", aug_refs, "Reference PGM files or directories")->required();
  aug->add_option("--out", aug_out, "Output directory")->required();
  aug->add_option("--iterations", nst.iterations, "Optimizer iterations")->capture_default_str();
  aug->add_option("--alpha", nst.weights.alpha, "Content weight")->capture_default_str();
  aug->add_option("--beta", nst.weights.beta, "Style weight")->capture_default_str();
  aug->add_option("--gamma-beta-prime", nst.weights.gamma_beta_prime, "Scale of the multi-reference style loss")
      ->capture_default_str();
  aug->add_option("--layer-weight", nst.layer_weight, "Weight of every style layer")->capture_default_str();
  aug->add_option("--initial-step", nst.initial_step, "First optimizer step size")->capture_default_str();
  aug->add_option("--init", aug_init, "content or noise")->capture_default_str();
  aug->add_option("--policy", aug_policy, "singles+full, singles or full")->capture_default_str();
  aug->add_option("--histogram", aug_hist, "match or identity")->capture_default_str();
  aug->add_option("--bins", aug_opts.bins, "Histogram bins")->capture_default_str();
  aug->add_option("--workers", aug_opts.workers, "Parallel workers")->capture_default_str();
  aug->add_option("--seed", nst.seed, "Optimizer seed")->capture_default_str();
  aug->add_option("--net-seed", net_seed, "Feature network seed")->capture_default_str();

  // explain
  auto* exp = app.add_subcommand("explain", "Relevance heatmap of one image");
  std::string exp_in, exp_out, exp_model, exp_target = "layer:stage4", exp_layer, exp_degenerate = "error",
                                          exp_pool = "uniform";
  LrpConfig lrp;
  exp->add_option("input", exp_in, "Input PGM")->required();
  exp->add_option("--out", exp_out, "Heatmap PPM (a .txt sidecar is written next to it)")->required();
  exp->add_option("--model", exp_model, "Network weights (default: the seeded feature network)");
  exp->add_option("--net-seed", net_seed, "Feature network seed when no model is given")->capture_default_str();
  exp->add_option("--target", exp_target, "layer:<name>, unit:<name>:<index> or logit:<class>")
      ->capture_default_str();
  exp->add_option("--render-layer", exp_layer, "Render a layer's relevance instead of the pixels");
  exp->add_option("--alpha", lrp.alpha, "Positive-part coefficient")->capture_default_str();
  exp->add_option("--beta", lrp.beta, "Negative-part coefficient")->capture_default_str();
  exp->add_option("--epsilon", lrp.epsilon, "Denominator stabilizer")->capture_default_str();
  exp->add_option("--degenerate", exp_degenerate, "error, absorb or fold")->capture_default_str();
  exp->add_option("--pool", exp_pool, "uniform or proportional")->capture_default_str();

  // train
  auto* trn = app.add_subcommand("train", "Train the classifier on the training part of a corpus");
  std::string trn_data, trn_aug, trn_out;
  TrainConfig tcfg;
  SplitFlags trn_split;
  trn->add_option("--data", trn_data, "Corpus root")->required();
  trn->add_option("--augmented", trn_aug, "Extra training corpus root (benign/ and malignant/)");
  trn->add_option("--out", trn_out, "Output directory for model.wts, history.txt and split.txt")->required();
  add_split_flags(trn, trn_split);
  add_train_flags(trn, tcfg);

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "Score a trained model, or compare two metric reports");
  std::string evl_model, evl_data, evl_part = "test", evl_out, evl_pre, evl_post;
  SplitFlags evl_split;
  evl->add_option("--model", evl_model, "Model weights written by train");
  evl->add_option("--data", evl_data, "Corpus root");
  evl->add_option("--part", evl_part, "test, val, train or all")->capture_default_str();
  evl->add_option("--out", evl_out, "Also write the report here");
  evl->add_option("--pre", evl_pre, "Metrics report before augmentation (comparison mode)");
  evl->add_option("--post", evl_post, "Metrics report after augmentation (comparison mode)");
  add_split_flags(evl, evl_split);

  // benchmark-scaling
  auto* ben = app.add_subcommand("benchmark-scaling", "Wall-clock speedup over worker counts");
  std::string ben_workers = "1,2,4,8", ben_workload = "augment";
  std::size_t ben_steps = 50, ben_images = 8;
  std::uint64_t ben_seed = 1;
  ben->add_option("--workers", ben_workers, "Comma-separated worker counts")->capture_default_str();
  ben->add_option("--steps", ben_steps, "NST iterations per image, or SGD steps")->capture_default_str();
  ben->add_option("--workload", ben_workload, "augment or train")->capture_default_str();
  ben->add_option("--images", ben_images, "Content images (augment) or images per class (train)")
      ->capture_default_str();
  ben->add_option("--seed", ben_seed, "Seed")->capture_default_str();

  // run
  auto* run = app.add_subcommand("run", "Full pipeline from a key=value configuration");
  std::string run_config;
  bool run_print = false;
  run->add_option("--config", run_config, "Configuration file");
  run->add_flag("--print-config", run_print, "Print the resolved configuration and exit");
  std::map<std::string, std::string> overrides;
  for (const auto& key : PipelineConfig::keys()) {
    run->add_option_function<std::string>(
        "--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; },
        "Overrides " + key + " (default " + PipelineConfig().to_map().at(key) + ")");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const Dataset ds = gen_synthetic(gen_n, gen_size, gen_seed, gen_out);
      std::cout << "benign " << ds.count(Label::benign) << "\nmalignant " << ds.count(Label::malignant) << '\n';
    } else if (*ing) {
      const Dataset ds = ingest(ing_root, ing_skip);
      for (const auto& s : ds.skipped) std::cerr << "skipped " << s << '\n';
      for (const auto& it : ds.items) {
        std::cout << label_name(it.label) << ' ' << it.path.string() << ' ' << std::hex << std::setw(16)
                  << std::setfill('0') << file_checksum(it.path) << std::dec << '\n';
      }
      std::cout << "# benign " << ds.count(Label::benign) << " malignant " << ds.count(Label::malignant) << '\n';
    } else if (*den) {
      const Image img = read_pgm(den_in);
      if (!den_region.empty()) srad.region = Region::parse(den_region);
      const auto scales = srad_multiscale(img, srad);
      const Region r = srad.region.value_or(Region{0, 0, img.width(), img.height()});
      const fs::path parent = fs::path(den_prefix).parent_path();
      if (!parent.empty()) fs::create_directories(parent);
      std::cout << "# scale path region_variance\n";
      std::cout << "0 " << den_in << ' ' << region_variance(img, r) << '\n';
      for (std::size_t k = 0; k < scales.size(); ++k) {
        const std::string path = den_prefix + "_s" + std::to_string(k + 1) + ".pgm";
        write_pgm(scales[k], path);
        std::cout << k + 1 << ' ' << path << ' ' << region_variance(scales[k], r) << '\n';
      }
    } else if (*aug) {
      if (aug_init == "noise") {
        nst.init = InitMode::noise;
      } else if (aug_init != "content") {
        throw ShapeError("--init: expected content or noise");
      }
      aug_opts.policy = parse_combination_policy(aug_policy);
      if (aug_hist == "identity") {
        aug_opts.mode = HistogramMode::identity;
      } else if (aug_hist != "match") {
        throw ShapeError("--histogram: expected match or identity");
      }
      const auto contents = load_images(aug_content), refs = load_images(aug_refs);
      const Network net = build_network(default_feature_layers(), net_seed);
      const auto man = augment_batch(contents, refs, net, nst, aug_out, aug_opts);
      std::cout << "combinations " << man.combinations << "\noutputs " << man.records.size() << "\nmanifest "
                << (fs::path(aug_out) / "manifest.txt").string() << '\n';
    } else if (*exp) {
      lrp.degenerate = parse_degenerate_rule(exp_degenerate);
      lrp.pool = parse_pool_rule(exp_pool);
      const Network net =
          exp_model.empty() ? build_network(default_feature_layers(), net_seed) : load_weights(exp_model);
      const auto colon = exp_target.find(':');
      const std::string kind = exp_target.substr(0, colon), arg = colon == std::string::npos ? "" : exp_target.substr(colon + 1);
      LrpTarget target;
      if (kind == "layer") {
        target = LrpTarget::layer_sum(net.find(arg));
      } else if (kind == "unit") {
        const auto c2 = arg.find(':');
        if (c2 == std::string::npos) throw ShapeError("--target unit:<name>:<index>");
        target = LrpTarget::unit_of(net.find(arg.substr(0, c2)), std::stoul(arg.substr(c2 + 1)));
      } else if (kind == "logit") {
        target = LrpTarget::logit(net, std::stoul(arg));
      } else {
        throw ShapeError("--target: expected layer:<name>, unit:<name>:<index> or logit:<class>");
      }
      const auto map = propagate(net, read_pgm(exp_in), target, lrp);
      std::optional<LayerId> layer;
      if (!exp_layer.empty()) layer = net.find(exp_layer);
      render_heatmap(map, layer, exp_out);
      std::cout << std::setprecision(12) << "f " << map.output << "\npixel_sum " << map.pixels.sum()
                << "\nmax_relative_gap " << map.max_relative_gap() << "\ndegenerate_neurons "
                << map.degenerate_neurons << "\n# layer relevance_sum relative_gap\n";
      for (const auto& e : map.audit) {
        std::cout << net.layers()[e.layer].name << ' ' << e.sum << ' ' << e.relative_gap << '\n';
      }
    } else if (*trn) {
      const Dataset ds = ingest(trn_data);
      const auto all = ds.load();
      const auto split = split_dataset(ds.labels(), trn_split.ratios, trn_split.seed);
      auto train = pick(all, split.train);
      const auto val = pick(all, split.val);
      if (!trn_aug.empty()) {
        const auto extra = ingest(trn_aug).load();
        train.insert(train.end(), extra.begin(), extra.end());
      }
      tcfg.seed = trn_split.seed;
      const auto res = train_head(train, val, tcfg);
      ensure_writable_dir(trn_out);
      save_weights(res.model.to_network(), fs::path(trn_out) / "model.wts");
      write_file(fs::path(trn_out) / "history.txt", res.history.to_text());
      std::ostringstream sp;
      for (const auto* part : {&split.train, &split.val, &split.test}) {
        sp << (part == &split.train ? "train" : part == &split.val ? "val" : "test");
        for (auto i : *part) sp << ' ' << all[i].id;
        sp << '\n';
      }
      write_file(fs::path(trn_out) / "split.txt", sp.str());
      std::cout << res.history.to_text();
    } else if (*evl) {
      if (!evl_pre.empty() || !evl_post.empty()) {
        if (evl_pre.empty() || evl_post.empty()) throw ShapeError("comparison needs both --pre and --post");
        auto slurp = [](const std::string& p) {
          std::ifstream in(p);
          if (!in) throw IoError("cannot read " + p);
          std::ostringstream s;
          s << in.rdbuf();
          return s.str();
        };
        const auto d = compare_pre_post(MetricsReport::parse(slurp(evl_pre)), MetricsReport::parse(slurp(evl_post)));
        std::cout << d.to_text();
        if (!evl_out.empty()) write_file(evl_out, d.to_text());
      } else {
        if (evl_model.empty() || evl_data.empty()) throw ShapeError("evaluate needs --model and --data");
        const Dataset ds = ingest(evl_data);
        const auto all = ds.load();
        std::vector<Sample> part;
        if (evl_part == "all") {
          part = all;
        } else {
          const auto split = split_dataset(ds.labels(), evl_split.ratios, evl_split.seed);
          if (evl_part == "test") {
            part = pick(all, split.test);
          } else if (evl_part == "val") {
            part = pick(all, split.val);
          } else if (evl_part == "train") {
            part = pick(all, split.train);
          } else {
            throw ShapeError("--part: expected test, val, train or all");
          }
        }
        const auto m = evaluate(load_weights(evl_model), part);
        print_metrics(m);
        if (!evl_out.empty()) write_file(evl_out, m.to_text());
      }
    } else if (*ben) {
      const auto counts = parse_workers(ben_workers);
      ScalingReport rep;
      if (ben_workload == "augment") {
        const auto samples = synthetic_samples(std::max<std::size_t>(ben_images, 2), 16, ben_seed);
        std::vector<NamedImage> contents, refs;
        for (std::size_t i = 0; i < ben_images; ++i) contents.push_back({samples[i].id, samples[i].image});
        refs = {{samples.back().id, samples.back().image}, {samples[samples.size() - 2].id, samples[samples.size() - 2].image}};
        const Network net = build_network(default_feature_layers(), ben_seed);
        NstConfig cfg;
        cfg.iterations = ben_steps;
        cfg.weights.gamma_beta_prime = 100.0;
        const fs::path tmp = fs::temp_directory_path() / "nstaug_benchmark";
        fs::remove_all(tmp);
        rep = speedup_benchmark(
            [&](std::size_t w) {
              AugmentOptions o;
              o.workers = w;
              augment_batch(contents, refs, net, cfg, tmp / std::to_string(w), o);
            },
            counts, "augment (" + std::to_string(contents.size()) + " images x 3 combinations, " +
                        std::to_string(ben_steps) + " iterations)");
        fs::remove_all(tmp);
      } else if (ben_workload == "train") {
        const auto data = synthetic_samples(ben_images, 16, ben_seed);
        const Classifier model(ben_seed);
        const ClassifierObjective obj(model, data, 0.5);
        rep = speedup_benchmark(
            [&](std::size_t w) {
              SgdConfig sgd;
              sgd.steps = ben_steps;
              sgd.batch_per_worker = std::max<std::size_t>(1, 32 / w);
              sgd.learning_rate = 1e-4;
              sgd.seed = ben_seed;
              distributed_train(WorkerGroup::make(w, data.size(), ben_seed), obj, model.flat_parameters(), sgd);
            },
            counts, "train (global batch 32, " + std::to_string(ben_steps) + " steps)");
      } else {
        throw ShapeError("--workload: expected augment or train");
      }
      std::cout << format_scaling_table(rep);
    } else if (*run) {
      PipelineConfig cfg = run_config.empty() ? PipelineConfig{} : load_config(run_config);
      for (const auto& [k, v] : overrides) cfg.set(k, v);
      if (run_print) {
        for (const auto& [k, v] : cfg.to_map()) std::cout << k << " = " << v << '\n';
        return 0;
      }
      const auto rep = run_pipeline(cfg);
      for (const auto& s : rep.stages_run) std::cout << "stage " << s << " done\n";
      if (rep.pre) std::cout << "# pre-augmentation\n" << rep.pre->to_text();
      if (rep.post) std::cout << "# post-augmentation\n" << rep.post->to_text();
      if (rep.delta) std::cout << rep.delta->to_text();
      if (rep.scaling) std::cout << format_scaling_table(*rep.scaling);
      std::cout << "manifest " << rep.manifest.string() << '\n';
    }
  } catch (const PipelineError& e) {
    std::cerr << "nstaug: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "nstaug: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
