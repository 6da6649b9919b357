#include "nstaug/featnet.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "nstaug/rng.hpp"

namespace nstaug {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::residual_add: return "residual_add";
    case LayerKind::global_pool: return "global_pool";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv(std::size_t out_channels, std::size_t kernel, std::size_t padding, std::string name) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.padding = padding;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::activation(LayerKind kind, std::string name, double slope) {
  LayerSpec s;
  s.kind = kind;
  s.slope = slope;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::pool(LayerKind kind, std::size_t window, std::string name) {
  LayerSpec s;
  s.kind = kind;
  s.window = window;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::residual(LayerId skip_from, std::string name) {
  LayerSpec s;
  s.kind = LayerKind::residual_add;
  s.skip_from = skip_from;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::global_pool(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::global_pool;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::dense(std::size_t units, std::string name) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.out_channels = units;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::softmax(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::softmax;
  s.name = std::move(name);
  return s;
}

// FeatureStack ---------------------------------------------------------------

void FeatureStack::insert(LayerId id, Tensor activation) {
  Entry e;
  e.n = activation.rank() >= 1 ? activation.dim(0) : 0;
  e.m = e.n == 0 ? 0 : activation.size() / e.n;
  e.activation = std::move(activation);
  maps_[id] = std::move(e);
}

const Tensor& FeatureStack::at(LayerId id) const {
  auto it = maps_.find(id);
  if (it == maps_.end()) throw ShapeError("feature stack has no layer " + std::to_string(id));
  return it->second.activation;
}

std::size_t FeatureStack::channels(LayerId id) const {
  at(id);
  return maps_.at(id).n;
}

std::size_t FeatureStack::spatial(LayerId id) const {
  at(id);
  return maps_.at(id).m;
}

std::set<LayerId> FeatureStack::layers() const {
  std::set<LayerId> ids;
  for (const auto& [id, e] : maps_) ids.insert(id);
  return ids;
}

// Network --------------------------------------------------------------------

namespace {

struct ShapeState {
  bool vector = false;
  std::size_t channels = 0;
};

[[noreturn]] void bad_layer(std::size_t index, const LayerSpec& spec, const std::string& what) {
  throw ShapeError("layer " + std::to_string(index) + " (" + std::string(layer_kind_name(spec.kind)) +
                   "): " + what);
}

}  // namespace

Network::Network(std::size_t input_channels, std::vector<LayerSpec> layers, std::uint64_t seed)
    : input_channels_(input_channels), layers_(std::move(layers)) {
  if (layers_.empty()) throw ShapeError("network spec is empty");
  if (input_channels_ == 0) throw ShapeError("network needs at least one input channel");

  std::vector<ShapeState> out_shapes;
  ShapeState cur{false, input_channels_};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    switch (s.kind) {
      case LayerKind::conv:
        if (cur.vector) bad_layer(i, s, "conv needs a (C,H,W) input, got a vector");
        if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0) bad_layer(i, s, "zero extent");
        cur.channels = s.out_channels;
        break;
      case LayerKind::relu:
      case LayerKind::leaky_relu:
        break;
      case LayerKind::max_pool:
      case LayerKind::avg_pool:
        if (cur.vector) bad_layer(i, s, "pooling needs a (C,H,W) input");
        if (s.window == 0) bad_layer(i, s, "zero window");
        break;
      case LayerKind::residual_add: {
        if (i < 2 || s.skip_from >= i - 1) {
          bad_layer(i, s, "skip source " + std::to_string(s.skip_from) + " must precede layer " +
                              std::to_string(i - 1));
        }
        const ShapeState& src = out_shapes[s.skip_from];
        if (src.vector != cur.vector || src.channels != cur.channels) {
          bad_layer(i, s, "skip source has " + std::to_string(src.channels) + " channels, branch has " +
                              std::to_string(cur.channels));
        }
        break;
      }
      case LayerKind::global_pool:
        if (cur.vector) bad_layer(i, s, "global pool needs a (C,H,W) input");
        cur.vector = true;
        break;
      case LayerKind::dense:
        if (!cur.vector) bad_layer(i, s, "dense needs a vector input (add a global pool first)");
        if (s.out_channels == 0) bad_layer(i, s, "zero units");
        cur.channels = s.out_channels;
        break;
      case LayerKind::softmax:
        if (!cur.vector) bad_layer(i, s, "softmax needs a vector input");
        break;
      default:
        bad_layer(i, s, "unknown layer kind");
    }
    out_shapes.push_back(cur);
  }

  // He-scaled normal weights, zero biases.
  Rng rng(seed);
  params_.resize(layers_.size());
  std::size_t in_c = input_channels_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    if (s.kind == LayerKind::conv || s.kind == LayerKind::dense) {
      const std::size_t fan_in = s.kind == LayerKind::conv ? in_c * s.kernel * s.kernel : in_c;
      Shape wshape = s.kind == LayerKind::conv ? Shape{s.out_channels, in_c, s.kernel, s.kernel}
                                               : Shape{s.out_channels, in_c};
      Tensor w(wshape);
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : w.values()) v = stddev * rng.normal();
      params_[i].weight = std::move(w);
      params_[i].bias.assign(s.bias ? s.out_channels : 0, 0.0);
    }
    in_c = out_shapes[i].channels;
  }
}

std::optional<LayerId> Network::try_find(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  return std::nullopt;
}

LayerId Network::find(std::string_view name) const {
  if (auto id = try_find(name)) return *id;
  throw ShapeError("unknown layer '" + std::string(name) + "'");
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.weight.size() + p.bias.size();
  return n;
}

std::vector<double> Network::flat_parameters() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) {
    flat.insert(flat.end(), p.weight.values().begin(), p.weight.values().end());
    flat.insert(flat.end(), p.bias.begin(), p.bias.end());
  }
  return flat;
}

void Network::set_flat_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw ShapeError("parameter vector has " + std::to_string(flat.size()) + " entries, network has " +
                     std::to_string(parameter_count()));
  }
  std::size_t off = 0;
  for (auto& p : params_) {
    for (double& v : p.weight.values()) v = flat[off++];
    for (double& v : p.bias) v = flat[off++];
  }
}

std::uint64_t Network::parameter_checksum() const {
  const auto flat = flat_parameters();
  return checksum(flat);
}

namespace {

Tensor dense_forward(const Tensor& in, const LayerParams& p) {
  const std::size_t out_n = p.weight.dim(0), in_n = p.weight.dim(1);
  if (in.size() != in_n) {
    throw ShapeError("dense: input " + shape_str(in.shape()) + " vs weight " + shape_str(p.weight.shape()));
  }
  Tensor out({out_n});
  for (std::size_t o = 0; o < out_n; ++o) {
    double acc = p.bias.empty() ? 0.0 : p.bias[o];
    for (std::size_t i = 0; i < in_n; ++i) acc += p.weight[o * in_n + i] * in[i];
    out[o] = acc;
  }
  return out;
}

Tensor softmax_forward(const Tensor& in) {
  Tensor out(in.shape());
  double mx = in[0];
  for (double v : in.values()) mx = std::max(mx, v);
  double z = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) z += (out[i] = std::exp(in[i] - mx));
  for (double& v : out.values()) v /= z;
  return out;
}

void conv_backward(const Tensor& input, const LayerParams& p, const LayerSpec& s, const Tensor& grad_out,
                   Tensor& grad_in, double* grad_w, double* grad_b) {
  const std::size_t out_c = p.weight.dim(0), in_c = p.weight.dim(1), k = s.kernel;
  const long ih = static_cast<long>(input.height()), iw = static_cast<long>(input.width());
  const long pad = static_cast<long>(s.padding);
  for (std::size_t o = 0; o < out_c; ++o) {
    for (std::size_t oy = 0; oy < grad_out.height(); ++oy) {
      for (std::size_t ox = 0; ox < grad_out.width(); ++ox) {
        const double g = grad_out.at(o, oy, ox);
        if (g == 0.0) continue;
        if (grad_b) grad_b[o] += g;
        for (std::size_t c = 0; c < in_c; ++c) {
          for (std::size_t m = 0; m < k; ++m) {
            const long y = static_cast<long>(oy * s.stride + m) - pad;
            if (y < 0 || y >= ih) continue;
            for (std::size_t n = 0; n < k; ++n) {
              const long x = static_cast<long>(ox * s.stride + n) - pad;
              if (x < 0 || x >= iw) continue;
              const std::size_t widx = ((o * in_c + c) * k + m) * k + n;
              const auto yy = static_cast<std::size_t>(y), xx = static_cast<std::size_t>(x);
              grad_in.at(c, yy, xx) += p.weight[widx] * g;
              if (grad_w) grad_w[widx] += input.at(c, yy, xx) * g;
            }
          }
        }
      }
    }
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw ShapeError("gradient shape " + shape_str(src.shape()) + " does not match activation " +
                     shape_str(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Activations Network::forward(const Tensor& input) const {
  if (input.rank() != 3 || input.channels() != input_channels_) {
    throw ShapeError("network expects (" + std::to_string(input_channels_) + ",H,W) input, got " +
                     shape_str(input.shape()));
  }
  Activations acts;
  acts.input = input;
  acts.outputs.reserve(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    const Tensor& in = acts.input_of(i);
    switch (s.kind) {
      case LayerKind::conv:
        acts.outputs.push_back(conv2d(in, params_[i].weight, params_[i].bias, s.stride, s.padding));
        break;
      case LayerKind::relu: acts.outputs.push_back(relu(in)); break;
      case LayerKind::leaky_relu: acts.outputs.push_back(leaky_relu(in, s.slope)); break;
      case LayerKind::max_pool: acts.outputs.push_back(pool2d(in, s.window, PoolMode::max)); break;
      case LayerKind::avg_pool: acts.outputs.push_back(pool2d(in, s.window, PoolMode::avg)); break;
      case LayerKind::residual_add:
        acts.outputs.push_back(elementwise(ElementOp::add, in, acts.outputs[s.skip_from]));
        break;
      case LayerKind::global_pool: {
        auto v = global_avg_pool(in);
        acts.outputs.emplace_back(Shape{v.size()}, std::move(v));
        break;
      }
      case LayerKind::dense: acts.outputs.push_back(dense_forward(in, params_[i])); break;
      case LayerKind::softmax: acts.outputs.push_back(softmax_forward(in)); break;
    }
  }
  return acts;
}

Gradients Network::backward(const Activations& acts, const std::map<LayerId, Tensor>& upstream,
                            bool with_params) const {
  if (acts.outputs.size() != layers_.size()) throw ShapeError("activations do not belong to this network");
  std::vector<Tensor> grads(layers_.size());
  for (const auto& [id, g] : upstream) {
    if (id >= layers_.size()) throw ShapeError("upstream gradient for unknown layer " + std::to_string(id));
    if (g.shape() != acts.outputs[id].shape()) {
      throw ShapeError("upstream gradient " + shape_str(g.shape()) + " does not match layer " +
                       std::to_string(id) + " output " + shape_str(acts.outputs[id].shape()));
    }
    grads[id] = g;
  }
  std::size_t top = 0;
  for (const auto& [id, g] : upstream) top = std::max(top, id + 1);

  Gradients out;
  out.pixels = Tensor(acts.input.shape());
  if (with_params) out.params.assign(parameter_count(), 0.0);

  std::vector<std::size_t> offsets(layers_.size(), 0);
  for (std::size_t i = 0, off = 0; i < layers_.size(); ++i) {
    offsets[i] = off;
    off += params_[i].weight.size() + params_[i].bias.size();
  }

  auto grad_slot = [&](LayerId id) -> Tensor& {
    if (grads[id].empty()) grads[id] = Tensor(acts.outputs[id].shape());
    return grads[id];
  };

  for (std::size_t ii = top; ii-- > 0;) {
    if (grads[ii].empty()) continue;
    const LayerSpec& s = layers_[ii];
    const Tensor& g = grads[ii];
    const Tensor& in = acts.input_of(ii);
    Tensor gin(in.shape());
    switch (s.kind) {
      case LayerKind::conv: {
        double* gw = with_params ? out.params.data() + offsets[ii] : nullptr;
        double* gb = with_params && !params_[ii].bias.empty() ? gw + params_[ii].weight.size() : nullptr;
        conv_backward(in, params_[ii], s, g, gin, gw, gb);
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < g.size(); ++k) gin[k] = in[k] > 0.0 ? g[k] : 0.0;
        break;
      case LayerKind::leaky_relu:
        for (std::size_t k = 0; k < g.size(); ++k) gin[k] = in[k] > 0.0 ? g[k] : s.slope * g[k];
        break;
      case LayerKind::max_pool:
        for (std::size_t c = 0; c < g.channels(); ++c) {
          for (std::size_t oy = 0; oy < g.height(); ++oy) {
            for (std::size_t ox = 0; ox < g.width(); ++ox) {
              std::size_t by = oy * s.window, bx = ox * s.window;
              for (std::size_t dy = 0; dy < s.window; ++dy) {
                for (std::size_t dx = 0; dx < s.window; ++dx) {
                  if (in.at(c, oy * s.window + dy, ox * s.window + dx) > in.at(c, by, bx)) {
                    by = oy * s.window + dy;
                    bx = ox * s.window + dx;
                  }
                }
              }
              gin.at(c, by, bx) += g.at(c, oy, ox);
            }
          }
        }
        break;
      case LayerKind::avg_pool: {
        const double inv = 1.0 / static_cast<double>(s.window * s.window);
        for (std::size_t c = 0; c < in.channels(); ++c) {
          for (std::size_t y = 0; y < in.height(); ++y) {
            for (std::size_t x = 0; x < in.width(); ++x) gin.at(c, y, x) = g.at(c, y / s.window, x / s.window) * inv;
          }
        }
        break;
      }
      case LayerKind::residual_add:
        gin = g;
        add_into(grad_slot(s.skip_from), g);
        break;
      case LayerKind::global_pool: {
        const std::size_t hw = in.height() * in.width();
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t c = 0; c < in.channels(); ++c) {
          for (std::size_t k = 0; k < hw; ++k) gin[c * hw + k] = g[c] * inv;
        }
        break;
      }
      case LayerKind::dense: {
        const Tensor& w = params_[ii].weight;
        const std::size_t out_n = w.dim(0), in_n = w.dim(1);
        double* gw = with_params ? out.params.data() + offsets[ii] : nullptr;
        for (std::size_t o = 0; o < out_n; ++o) {
          for (std::size_t k = 0; k < in_n; ++k) {
            gin[k] += w[o * in_n + k] * g[o];
            if (gw) gw[o * in_n + k] += g[o] * in[k];
          }
          if (gw && !params_[ii].bias.empty()) gw[w.size() + o] += g[o];
        }
        break;
      }
      case LayerKind::softmax: {
        const Tensor& sm = acts.outputs[ii];
        double dot = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) dot += g[k] * sm[k];
        for (std::size_t k = 0; k < g.size(); ++k) gin[k] = sm[k] * (g[k] - dot);
        break;
      }
    }
    if (ii == 0) {
      add_into(out.pixels, gin);
    } else {
      add_into(grad_slot(ii - 1), gin);
    }
  }
  return out;
}

std::vector<LayerSpec> default_feature_layers(LayerKind activation, double slope) {
  auto act = [&](std::string name) { return LayerSpec::activation(activation, std::move(name), slope); };
  std::vector<LayerSpec> l;
  l.push_back(LayerSpec::conv(8, 3, 1, "conv1"));
  l.push_back(act("stage1"));
  l.push_back(LayerSpec::pool(LayerKind::avg_pool, 2, "pool1"));
  l.push_back(LayerSpec::conv(16, 3, 1, "conv2"));
  l.push_back(act("stage2"));
  l.push_back(LayerSpec::pool(LayerKind::avg_pool, 2, "pool2"));
  l.push_back(LayerSpec::conv(16, 3, 1, "conv3a"));
  l.push_back(act("stage3_in"));
  l.push_back(LayerSpec::conv(16, 3, 1, "conv3b"));
  l.push_back(LayerSpec::residual(7, "res3"));
  l.push_back(act("stage3"));
  l.push_back(LayerSpec::pool(LayerKind::avg_pool, 2, "pool3"));
  l.push_back(LayerSpec::conv(32, 3, 1, "conv4"));
  l.push_back(act("stage4"));
  return l;
}

Network build_network(std::vector<LayerSpec> layers, std::uint64_t seed, std::size_t input_channels) {
  return Network(input_channels, std::move(layers), seed);
}

FeatureStack features_from(const Activations& acts, const std::set<LayerId>& layers) {
  FeatureStack stack;
  for (LayerId id : layers) {
    if (id >= acts.outputs.size()) throw ShapeError("unknown layer id " + std::to_string(id));
    stack.insert(id, acts.outputs[id]);
  }
  return stack;
}

FeatureStack extract_features(const Network& net, const Image& image, const std::set<LayerId>& layers) {
  image.validate();
  for (LayerId id : layers) {
    if (id >= net.layer_count()) throw ShapeError("unknown layer id " + std::to_string(id));
  }
  return features_from(net.forward(image.to_tensor()), layers);
}

// Weight file ----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'N', 'S', 'T', 'A', 'U', 'G', 'W', '1'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError(path.string() + ": truncated weight file");
  return v;
}

}  // namespace

void save_weights(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, net.input_channels());
  put<std::uint64_t>(out, net.layer_count());
  for (const LayerSpec& s : net.layers()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.kind));
    put<std::uint32_t>(out, s.bias ? 1u : 0u);
    for (std::uint64_t v : {s.out_channels, s.kernel, s.stride, s.padding, s.window, s.skip_from}) {
      put<std::uint64_t>(out, v);
    }
    put<double>(out, s.slope);
    put<std::uint64_t>(out, s.name.size());
    out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
  }
  const auto flat = net.flat_parameters();
  put<std::uint64_t>(out, flat.size());
  out.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  put<std::uint64_t>(out, checksum(flat));
  if (!out) throw IoError("write failed: " + path.string());
}

Network load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError(path.string() + ": bad magic");
  const auto input_channels = get<std::uint64_t>(in, path);
  const auto count = get<std::uint64_t>(in, path);
  if (count > 100000) throw IoError(path.string() + ": implausible layer count");
  std::vector<LayerSpec> specs(count);
  for (LayerSpec& s : specs) {
    const auto kind = get<std::uint32_t>(in, path);
    if (kind > static_cast<std::uint32_t>(LayerKind::softmax)) throw IoError(path.string() + ": unknown layer kind");
    s.kind = static_cast<LayerKind>(kind);
    s.bias = get<std::uint32_t>(in, path) != 0;
    s.out_channels = get<std::uint64_t>(in, path);
    s.kernel = get<std::uint64_t>(in, path);
    s.stride = get<std::uint64_t>(in, path);
    s.padding = get<std::uint64_t>(in, path);
    s.window = get<std::uint64_t>(in, path);
    s.skip_from = get<std::uint64_t>(in, path);
    s.slope = get<double>(in, path);
    const auto len = get<std::uint64_t>(in, path);
    if (len > 4096) throw IoError(path.string() + ": implausible layer name");
    s.name.resize(len);
    in.read(s.name.data(), static_cast<std::streamsize>(len));
  }
  Network net(input_channels, std::move(specs), 0);
  const auto n = get<std::uint64_t>(in, path);
  if (n != net.parameter_count()) throw IoError(path.string() + ": parameter count does not match header shapes");
  std::vector<double> flat(n);
  in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError(path.string() + ": truncated parameters");
  if (get<std::uint64_t>(in, path) != checksum(flat)) throw IoError(path.string() + ": checksum mismatch");
  net.set_flat_parameters(flat);
  return net;
}

}  // namespace nstaug
