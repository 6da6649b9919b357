#include "nstaug/nst.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "nstaug/dist_train.hpp"
#include "nstaug/rng.hpp"

namespace nstaug {

void NstConfig::validate() const {
  if (iterations < 1) throw ShapeError("NstConfig: iterations must be >= 1");
  if (!(initial_step > 0.0) || !std::isfinite(initial_step)) throw ShapeError("NstConfig: step size must be > 0");
  if (!(step_growth >= 1.0)) throw ShapeError("NstConfig: step_growth must be >= 1");
  if (!(step_shrink > 0.0 && step_shrink < 1.0)) throw ShapeError("NstConfig: step_shrink must be in (0,1)");
  if (!(min_step > 0.0)) throw ShapeError("NstConfig: min_step must be > 0");
  if (style_layers.empty() && weights.layer_weights.empty()) throw ShapeError("NstConfig: no style layers");
  if (!(layer_weight >= 0.0) || !std::isfinite(layer_weight)) throw ShapeError("NstConfig: bad layer weight");
}

LossWeights NstConfig::resolved_weights(const Network& net) const {
  LossWeights w = weights;
  if (w.layer_weights.empty()) {
    for (const auto& name : style_layers) w.layer_weights[net.find(name)] = layer_weight;
  }
  w.validate();
  return w;
}

namespace {

struct Problem {
  const Network& net;
  LossWeights weights;
  LayerId content_id;
  Tensor content_features;
  std::map<LayerId, GramMatrix> targets;
};

struct Evaluation {
  LossRecord loss;
  Activations acts;
};

Problem make_problem(const Image& content, const ReferenceSet& refs, const Network& net, const NstConfig& cfg) {
  Problem p{net, cfg.resolved_weights(net), net.find(cfg.content_layer), {}, {}};
  content.validate();
  refs.validate();
  for (const auto& img : refs.images) {
    if (img.height() != content.height() || img.width() != content.width())
      throw ShapeError("stylize: reference size differs from content size");
  }
  p.content_features = net.forward(content.to_tensor()).outputs[p.content_id];
  if (p.weights.beta > 0.0) p.targets = multi_ref_targets(refs, net, p.weights);
  return p;
}

// Gram form of the proposed loss; same value as the kernel expansion.
Evaluation evaluate(const Problem& p, const Tensor& x) {
  Evaluation e;
  e.acts = p.net.forward(x);
  e.loss.content = content_loss(e.acts.outputs[p.content_id], p.content_features);
  double style = 0.0;
  if (p.weights.beta > 0.0) {
    for (const auto& [id, w] : p.weights.layer_weights) {
      const Tensor& f = e.acts.outputs[id];
      const std::size_t n = f.channels(), m = f.height() * f.width();
      style += w * style_layer_loss(gram(f, id), p.targets.at(id), n, m);
    }
    style *= p.weights.gamma_beta_prime;
  }
  e.loss.style = style;
  e.loss.total = total_loss(e.loss.content, e.loss.style, p.weights);
  return e;
}

Tensor gradient(const Problem& p, const Activations& acts) {
  std::map<LayerId, Tensor> up;
  const double a = p.weights.alpha;
  if (a > 0.0) {
    Tensor g = content_loss_gradient(acts.outputs[p.content_id], p.content_features);
    for (double& v : g.values()) v *= a;
    up.emplace(p.content_id, std::move(g));
  }
  const double s = p.weights.beta * p.weights.gamma_beta_prime;
  if (s > 0.0) {
    for (const auto& [id, w] : p.weights.layer_weights) {
      if (w == 0.0) continue;
      Tensor g = style_layer_gradient(acts.outputs[id], p.targets.at(id));
      for (double& v : g.values()) v *= s * w;
      auto it = up.find(id);
      if (it == up.end()) {
        up.emplace(id, std::move(g));
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
  }
  if (up.empty()) return Tensor(acts.input.shape());
  return p.net.backward(acts, up, false).pixels;
}

Tensor initial_image(const Image& content, const NstConfig& cfg) {
  Tensor x = content.to_tensor();
  if (cfg.init == InitMode::noise) {
    Rng rng(cfg.seed);
    for (double& v : x.values()) v = rng.uniform();
  }
  return x;
}

void clamp01(Tensor& t) {
  for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

StylizeResult stylize(const Image& content, const ReferenceSet& refs, const Network& net, const NstConfig& cfg) {
  cfg.validate();
  const Problem p = make_problem(content, refs, net, cfg);

  Tensor x = initial_image(content, cfg);
  Evaluation cur = evaluate(p, x);
  std::vector<LossRecord> trace{cur.loss};
  if (!std::isfinite(cur.loss.total)) throw NstAborted("stylize: non-finite initial loss", trace);

  double step = cfg.initial_step;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    const Tensor g = gradient(p, cur.acts);
    bool moved = false;
    while (true) {
      Tensor cand = x;
      for (std::size_t i = 0; i < cand.size(); ++i) cand[i] -= step * g[i];
      if (cfg.clamp == ClampMode::every_step) clamp01(cand);
      Evaluation next = evaluate(p, cand);
      if (std::isnan(next.loss.total)) {
        throw NstAborted("stylize: loss became NaN at iteration " + std::to_string(it), trace);
      }
      if (next.loss.total <= cur.loss.total) {
        moved = cand != x;
        x = std::move(cand);
        cur = std::move(next);
        step *= cfg.step_growth;
        break;
      }
      step *= cfg.step_shrink;
      if (step < cfg.min_step) {
        throw NstAborted("stylize: step size underflow at iteration " + std::to_string(it), trace);
      }
    }
    cur.loss.iteration = it;
    trace.push_back(cur.loss);
    // a stationary point stays stationary; record the remaining iterations
    if (!moved && cur.loss.total == 0.0) {
      for (std::size_t rest = it + 1; rest <= cfg.iterations; ++rest) {
        LossRecord r = cur.loss;
        r.iteration = rest;
        trace.push_back(r);
      }
      break;
    }
  }
  if (cfg.clamp == ClampMode::final_only) clamp01(x);
  return {Image::from_tensor(x), std::move(trace)};
}

LossRecord evaluate_objective(const Image& image, const Image& content, const ReferenceSet& refs,
                              const Network& net, const NstConfig& cfg) {
  const Problem p = make_problem(content, refs, net, cfg);
  image.validate();
  return evaluate(p, image.to_tensor()).loss;
}

Tensor objective_gradient(const Image& image, const Image& content, const ReferenceSet& refs, const Network& net,
                          const NstConfig& cfg) {
  const Problem p = make_problem(content, refs, net, cfg);
  image.validate();
  return gradient(p, evaluate(p, image.to_tensor()).acts);
}

std::vector<double> windowed_means(const std::vector<LossRecord>& trace, std::size_t window) {
  std::vector<double> out;
  for (std::size_t t = 0; window > 0 && t + window <= trace.size(); ++t) {
    double acc = 0.0;
    for (std::size_t i = t; i < t + window; ++i) acc += trace[i].total;
    out.push_back(acc / static_cast<double>(window));
  }
  return out;
}

void write_trace(const std::vector<LossRecord>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write trace " + path.string());
  out << "# iteration content style total\n" << std::setprecision(17);
  for (const auto& r : trace) out << r.iteration << ' ' << r.content << ' ' << r.style << ' ' << r.total << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<LossRecord> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read trace " + path.string());
  std::vector<LossRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    LossRecord r;
    if (!(ls >> r.iteration >> r.content >> r.style >> r.total)) throw IoError("malformed trace line: " + line);
    out.push_back(r);
  }
  return out;
}

// Batch ----------------------------------------------------------------------

CombinationPolicy parse_combination_policy(const std::string& s) {
  if (s == "singles+full" || s == "singles_and_full") return CombinationPolicy::singles_and_full;
  if (s == "singles") return CombinationPolicy::singles;
  if (s == "full") return CombinationPolicy::full;
  throw ShapeError("unknown combination policy '" + s + "' (singles+full, singles, full)");
}

std::string to_string(CombinationPolicy p) {
  switch (p) {
    case CombinationPolicy::singles_and_full: return "singles+full";
    case CombinationPolicy::singles: return "singles";
    case CombinationPolicy::full: return "full";
  }
  return "?";
}

std::vector<std::vector<std::size_t>> style_combinations(std::size_t n_refs, CombinationPolicy policy) {
  if (n_refs == 0) throw ShapeError("style_combinations: no references");
  std::vector<std::vector<std::size_t>> out;
  if (policy != CombinationPolicy::full) {
    for (std::size_t i = 0; i < n_refs; ++i) out.push_back({i});
  }
  if (policy == CombinationPolicy::full || (policy == CombinationPolicy::singles_and_full && n_refs > 1)) {
    std::vector<std::size_t> all(n_refs);
    for (std::size_t i = 0; i < n_refs; ++i) all[i] = i;
    out.push_back(std::move(all));
  }
  return out;
}

void AugmentManifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << "# policy " << to_string(policy) << "\n# combinations " << combinations << "\n# outputs "
      << records.size() << "\n# source\trefs\tfinal_loss\toutput\ttrace\n"
      << std::setprecision(17);
  for (const auto& r : records) {
    out << r.source << '\t';
    for (std::size_t i = 0; i < r.refs.size(); ++i) out << (i ? "," : "") << r.refs[i];
    out << '\t' << r.final_loss << '\t' << r.output.string() << '\t' << r.trace.string() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

AugmentManifest AugmentManifest::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  AugmentManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key, val;
      ls >> key >> val;
      if (key == "policy") m.policy = parse_combination_policy(val);
      if (key == "combinations") m.combinations = std::stoul(val);
      continue;
    }
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string col;
    while (std::getline(ls, col, '\t')) cols.push_back(col);
    if (cols.size() != 5) throw IoError("malformed manifest line: " + line);
    AugmentRecord r;
    r.source = cols[0];
    std::istringstream rs(cols[1]);
    std::string id;
    while (std::getline(rs, id, ',')) r.refs.push_back(id);
    r.final_loss = std::stod(cols[2]);
    r.output = cols[3];
    r.trace = cols[4];
    m.records.push_back(std::move(r));
  }
  return m;
}

void ensure_writable_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const auto probe = dir / ".nstaug-write-probe";
  {
    std::ofstream out(probe);
    if (!out || !(out << "ok")) throw IoError("output directory not writable: " + dir.string());
  }
  std::filesystem::remove(probe, ec);
}

namespace {

std::string stem_of(const std::string& id) {
  std::string s = std::filesystem::path(id).stem().string();
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s.empty() ? "img" : s;
}

}  // namespace

AugmentManifest augment_batch(const std::vector<NamedImage>& contents, const std::vector<NamedImage>& refs,
                              const Network& net, const NstConfig& cfg, const std::filesystem::path& out_dir,
                              const AugmentOptions& opts) {
  if (contents.empty()) throw ShapeError("augment_batch: no content images");
  if (refs.empty()) throw ShapeError("augment_batch: no reference images");
  cfg.validate();
  ensure_writable_dir(out_dir);

  const auto combos = style_combinations(refs.size(), opts.policy);
  AugmentManifest manifest;
  manifest.policy = opts.policy;
  manifest.combinations = combos.size();
  manifest.records.resize(contents.size() * combos.size());

  parallel_for_shards(opts.workers, manifest.records.size(), [&](std::size_t job) {
    const std::size_t ci = job / combos.size();
    const std::size_t k = job % combos.size();
    ReferenceSet set;
    set.mode = opts.mode;
    set.bins = opts.bins;
    AugmentRecord rec;
    rec.source = contents[ci].id;
    for (std::size_t r : combos[k]) {
      set.images.push_back(refs[r].image);
      rec.refs.push_back(refs[r].id);
    }
    NstConfig local = cfg;
    local.seed = Rng::derive(cfg.seed, job).next_u64();
    const StylizeResult res = stylize(contents[ci].image, set, net, local);
    std::ostringstream name;
    name << std::setw(5) << std::setfill('0') << ci << '_' << stem_of(contents[ci].id) << "_c" << k;
    rec.output = out_dir / (name.str() + ".pgm");
    rec.trace = out_dir / (name.str() + ".trace");
    rec.final_loss = res.final().total;
    write_pgm(res.image, rec.output);
    write_trace(res.trace, rec.trace);
    manifest.records[job] = std::move(rec);
  });
  manifest.write(out_dir / "manifest.txt");
  return manifest;
}

}  // namespace nstaug
