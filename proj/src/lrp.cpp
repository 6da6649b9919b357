#include "nstaug/lrp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace nstaug {

void LrpConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
    throw ShapeError("lrp: alpha and beta must be finite and >= 0");
  if (std::abs(alpha - beta - 1.0) > 1e-12)
    throw ShapeError("lrp: alpha - beta must equal 1 (got alpha=" + std::to_string(alpha) +
                     ", beta=" + std::to_string(beta) + ")");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ShapeError("lrp: epsilon must be finite and >= 0");
}

PoolRule parse_pool_rule(const std::string& s) {
  if (s == "uniform") return PoolRule::uniform;
  if (s == "proportional") return PoolRule::proportional;
  throw ShapeError("unknown pool rule '" + s + "' (uniform, proportional)");
}

DegenerateRule parse_degenerate_rule(const std::string& s) {
  if (s == "error") return DegenerateRule::error;
  if (s == "absorb") return DegenerateRule::absorb;
  if (s == "fold") return DegenerateRule::fold;
  throw ShapeError("unknown degenerate rule '" + s + "' (error, absorb, fold)");
}

LrpTarget LrpTarget::layer_sum(LayerId layer) {
  LrpTarget t;
  t.kind = Kind::layer_sum;
  t.layer = layer;
  return t;
}

LrpTarget LrpTarget::unit_of(LayerId layer, std::size_t unit) {
  LrpTarget t;
  t.kind = Kind::unit;
  t.layer = layer;
  t.unit = unit;
  return t;
}

LrpTarget LrpTarget::content_loss(LayerId layer, Tensor reference) {
  LrpTarget t;
  t.kind = Kind::content_loss;
  t.layer = layer;
  t.reference = std::move(reference);
  return t;
}

LrpTarget LrpTarget::logit(const Network& net, std::size_t cls) {
  for (std::size_t i = net.layer_count(); i-- > 0;) {
    if (net.layers()[i].kind == LayerKind::dense) {
      if (cls >= net.layers()[i].out_channels) throw ShapeError("lrp: class index out of range");
      return unit_of(i, cls);
    }
  }
  throw ShapeError("lrp: network has no dense layer to take a logit from");
}

double RelevanceMap::max_relative_gap() const {
  double g = 0.0;
  for (const auto& e : audit) g = std::max(g, e.relative_gap);
  return g;
}

const Tensor& RelevanceMap::at(std::optional<LayerId> layer) const {
  if (!layer) return pixels;
  if (*layer >= layers.size()) throw ShapeError("relevance map has no layer " + std::to_string(*layer));
  return layers[*layer];
}

namespace {

struct Coefficients {
  double pos = 0.0;  // multiplies z+
  double neg = 0.0;  // multiplies z-
  bool uniform = false;
};

// Per-neuron factors so that R_i = pos * z_i^+ + neg * z_i^- (plus the
// uniform fallback of the fold rule when both sides are empty).
Coefficients coefficients(double sp, double sn, double r, const LrpConfig& cfg, std::size_t* degenerate) {
  Coefficients c;
  if (r == 0.0) return c;
  if (cfg.epsilon > 0.0) {
    c.pos = cfg.alpha * r / (sp + cfg.epsilon);
    c.neg = cfg.beta > 0.0 ? -cfg.beta * r / (sn - cfg.epsilon) : 0.0;
    if ((sp == 0.0 && cfg.alpha > 0.0) || (sn == 0.0 && cfg.beta > 0.0)) {
      if (degenerate) ++*degenerate;
    }
    return c;
  }
  const bool pos_empty = sp == 0.0 && cfg.alpha > 0.0;
  const bool neg_empty = sn == 0.0 && cfg.beta > 0.0;
  if (!pos_empty && !neg_empty) {
    c.pos = cfg.alpha > 0.0 ? cfg.alpha * r / sp : 0.0;
    c.neg = cfg.beta > 0.0 ? -cfg.beta * r / sn : 0.0;
    return c;
  }
  if (degenerate) ++*degenerate;
  switch (cfg.degenerate) {
    case DegenerateRule::error:
      throw LrpError("lrp: zero " + std::string(pos_empty ? "positive" : "negative") +
                     " denominator with epsilon = 0; use epsilon > 0 (e.g. 1e-9) or the fold rule");
    case DegenerateRule::absorb:
      c.pos = pos_empty ? 0.0 : cfg.alpha * r / sp;
      c.neg = neg_empty || cfg.beta == 0.0 ? 0.0 : -cfg.beta * r / sn;
      return c;
    case DegenerateRule::fold:
      if (sp != 0.0) {
        c.pos = r / sp;
      } else if (sn != 0.0) {
        c.neg = r / sn;
      } else {
        c.uniform = true;
      }
      return c;
  }
  return c;
}

void check_finite(const Tensor& t, LayerId layer) {
  if (!t.all_finite()) throw LrpError("lrp: non-finite relevance at layer " + std::to_string(layer));
}

}  // namespace

std::vector<double> lrp_dense(std::span<const double> a, const Tensor& weight, std::span<const double> r,
                              const LrpConfig& cfg, std::size_t* degenerate) {
  cfg.validate();
  if (weight.rank() != 2 || weight.dim(1) != a.size() || weight.dim(0) != r.size()) {
    throw ShapeError("lrp_dense: weight " + shape_str(weight.shape()) + " does not match input " +
                     std::to_string(a.size()) + " and relevance " + std::to_string(r.size()));
  }
  const std::size_t in = a.size(), out = r.size();
  std::vector<double> res(in, 0.0);
  for (std::size_t j = 0; j < out; ++j) {
    double sp = 0.0, sn = 0.0;
    for (std::size_t i = 0; i < in; ++i) {
      const double z = a[i] * weight[j * in + i];
      (z > 0.0 ? sp : sn) += z;
    }
    const Coefficients c = coefficients(sp, sn, r[j], cfg, degenerate);
    for (std::size_t i = 0; i < in; ++i) {
      const double z = a[i] * weight[j * in + i];
      res[i] += c.uniform ? r[j] / static_cast<double>(in) : (z > 0.0 ? c.pos * z : c.neg * z);
    }
  }
  return res;
}

Tensor lrp_conv(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding,
                const Tensor& r_out, const LrpConfig& cfg, std::size_t* degenerate) {
  cfg.validate();
  if (input.rank() != 3 || weight.rank() != 4 || weight.dim(1) != input.channels() || r_out.rank() != 3 ||
      r_out.channels() != weight.dim(0)) {
    throw ShapeError("lrp_conv: input " + shape_str(input.shape()) + ", kernel " + shape_str(weight.shape()) +
                     " and relevance " + shape_str(r_out.shape()) + " do not fit");
  }
  const std::size_t c_in = input.channels(), h = input.height(), w = input.width();
  const std::size_t k = weight.dim(2), kw = weight.dim(3);
  const std::size_t oh = r_out.height(), ow = r_out.width();
  if (oh != (h + 2 * padding - k) / stride + 1 || ow != (w + 2 * padding - kw) / stride + 1)
    throw ShapeError("lrp_conv: relevance " + shape_str(r_out.shape()) + " does not match the conv output");
  Tensor res(input.shape());
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  for (std::size_t o = 0; o < r_out.channels(); ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double r = r_out.at(o, oy, ox);
        if (r == 0.0) continue;
        const auto y0 = static_cast<std::ptrdiff_t>(oy * stride) - pad;
        const auto x0 = static_cast<std::ptrdiff_t>(ox * stride) - pad;
        double sp = 0.0, sn = 0.0;
        std::size_t in_range = 0;
        auto visit = [&](auto&& fn) {
          for (std::size_t c = 0; c < c_in; ++c)
            for (std::size_t dy = 0; dy < k; ++dy) {
              const auto y = y0 + static_cast<std::ptrdiff_t>(dy);
              if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const auto x = x0 + static_cast<std::ptrdiff_t>(dx);
                if (x < 0 || x >= static_cast<std::ptrdiff_t>(w)) continue;
                const auto yy = static_cast<std::size_t>(y), xx = static_cast<std::size_t>(x);
                const double z = input.at(c, yy, xx) * weight[((o * c_in + c) * k + dy) * kw + dx];
                fn(c, yy, xx, z);
              }
            }
        };
        visit([&](std::size_t, std::size_t, std::size_t, double z) {
          (z > 0.0 ? sp : sn) += z;
          ++in_range;
        });
        const Coefficients cf = coefficients(sp, sn, r, cfg, degenerate);
        visit([&](std::size_t c, std::size_t y, std::size_t x, double z) {
          res.at(c, y, x) += cf.uniform ? r / static_cast<double>(in_range) : (z > 0.0 ? cf.pos * z : cf.neg * z);
        });
      }
    }
  }
  return res;
}

Tensor lrp_pool(const Tensor& input, std::size_t window, PoolMode mode, const Tensor& r_out, const LrpConfig& cfg) {
  if (input.rank() != 3 || window == 0 || input.height() % window || input.width() % window)
    throw ShapeError("lrp_pool: input " + shape_str(input.shape()) + " does not fit window " + std::to_string(window));
  const std::size_t oh = input.height() / window, ow = input.width() / window;
  if (r_out.shape() != Shape{input.channels(), oh, ow})
    throw ShapeError("lrp_pool: relevance " + shape_str(r_out.shape()) + " does not match the pool output");
  Tensor res(input.shape());
  const double n = static_cast<double>(window * window);
  for (std::size_t c = 0; c < input.channels(); ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double r = r_out.at(c, oy, ox);
        const std::size_t y0 = oy * window, x0 = ox * window;
        if (mode == PoolMode::max) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t ties = 0;
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx) {
              const double v = input.at(c, y0 + dy, x0 + dx);
              if (v > best) {
                best = v;
                ties = 1;
              } else if (v == best) {
                ++ties;
              }
            }
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx)
              if (input.at(c, y0 + dy, x0 + dx) == best) res.at(c, y0 + dy, x0 + dx) = r / static_cast<double>(ties);
          continue;
        }
        double sum = 0.0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) sum += input.at(c, y0 + dy, x0 + dx);
        const bool prop = cfg.pool == PoolRule::proportional && sum != 0.0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx)
            res.at(c, y0 + dy, x0 + dx) = prop ? r * input.at(c, y0 + dy, x0 + dx) / sum : r / n;
      }
    }
  }
  return res;
}

Tensor lrp_global_pool(const Tensor& input, std::span<const double> r_out, const LrpConfig& cfg) {
  if (input.rank() != 3 || r_out.size() != input.channels())
    throw ShapeError("lrp_global_pool: input " + shape_str(input.shape()) + " and " + std::to_string(r_out.size()) +
                     " relevances do not fit");
  Tensor res(input.shape());
  const std::size_t m = input.height() * input.width();
  for (std::size_t c = 0; c < input.channels(); ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) sum += input[c * m + i];
    const bool prop = cfg.pool == PoolRule::proportional && sum != 0.0;
    for (std::size_t i = 0; i < m; ++i) res[c * m + i] = prop ? r_out[c] * input[c * m + i] / sum : r_out[c] / m;
  }
  return res;
}

RelevanceMap propagate(const Network& net, const Image& image, const LrpTarget& target, const LrpConfig& cfg) {
  image.validate();
  return propagate(net, net.forward(image.to_tensor()), target, cfg);
}

RelevanceMap propagate(const Network& net, const Activations& acts, const LrpTarget& target, const LrpConfig& cfg) {
  cfg.validate();
  if (acts.outputs.size() != net.layer_count()) throw ShapeError("lrp: activations do not belong to this network");
  if (target.layer >= net.layer_count()) throw ShapeError("lrp: unknown target layer " + std::to_string(target.layer));
  const LayerId top = target.layer;
  const Tensor& a_top = acts.outputs[top];

  RelevanceMap map;
  map.target_layer = top;
  std::vector<Tensor> buf(top + 1);
  for (std::size_t i = 0; i <= top; ++i) buf[i] = Tensor(acts.outputs[i].shape());
  Tensor buf_in(acts.input.shape());

  switch (target.kind) {
    case LrpTarget::Kind::layer_sum:
      buf[top] = a_top;
      break;
    case LrpTarget::Kind::unit:
      if (target.unit >= a_top.size()) throw ShapeError("lrp: unit index out of range for layer " + std::to_string(top));
      buf[top][target.unit] = a_top[target.unit];
      break;
    case LrpTarget::Kind::content_loss:
      if (target.reference.shape() != a_top.shape())
        throw ShapeError("lrp: content reference " + shape_str(target.reference.shape()) + " does not match layer " +
                         std::to_string(top) + " output " + shape_str(a_top.shape()));
      for (std::size_t i = 0; i < a_top.size(); ++i) buf[top][i] = 0.5 * std::pow(a_top[i] - target.reference[i], 2);
      break;
  }
  map.output = buf[top].sum();
  check_finite(buf[top], top);

  auto add_into = [](Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };
  const double scale = std::abs(map.output);

  for (std::size_t k = top + 1; k-- > 0;) {
    const LayerSpec& s = net.layers()[k];
    const Tensor& in = acts.input_of(k);
    Tensor& dst = k == 0 ? buf_in : buf[k - 1];
    const Tensor& r = buf[k];
    switch (s.kind) {
      case LayerKind::conv:
        add_into(dst, lrp_conv(in, net.params()[k].weight, s.stride, s.padding, r, cfg, &map.degenerate_neurons));
        break;
      case LayerKind::dense: {
        const auto v = lrp_dense(in.data(), net.params()[k].weight, r.data(), cfg, &map.degenerate_neurons);
        for (std::size_t i = 0; i < v.size(); ++i) dst[i] += v[i];
        break;
      }
      case LayerKind::relu:
      case LayerKind::leaky_relu:
      case LayerKind::softmax:
        add_into(dst, r);
        break;
      case LayerKind::max_pool:
        add_into(dst, lrp_pool(in, s.window, PoolMode::max, r, cfg));
        break;
      case LayerKind::avg_pool:
        add_into(dst, lrp_pool(in, s.window, PoolMode::avg, r, cfg));
        break;
      case LayerKind::global_pool:
        add_into(dst, lrp_global_pool(in, r.data(), cfg));
        break;
      case LayerKind::residual_add: {
        const Tensor& skip = acts.outputs[s.skip_from];
        Tensor& dst_skip = buf[s.skip_from];
        for (std::size_t i = 0; i < r.size(); ++i) {
          const double a = in[i], b = skip[i], sum = a + b;
          double share = 0.5;
          if (cfg.residual == ResidualRule::proportional && sum != 0.0) share = a / sum;
          dst[i] += share * r[i];
          dst_skip[i] += r[i] - share * r[i];
        }
        break;
      }
    }
    check_finite(dst, k);

    // relevance in flight across the cut below layer k
    double held = buf_in.sum();
    for (std::size_t i = 0; i < k; ++i) held += buf[i].sum();
    const double gap = std::abs(held - map.output);
    map.audit.push_back({k, held, scale > 0.0 ? gap / scale : gap});
  }
  map.layers = std::move(buf);
  map.pixels = std::move(buf_in);
  return map;
}

std::vector<double> relevance_plane(const Tensor& r, std::size_t& height, std::size_t& width) {
  if (r.rank() == 3) {
    height = r.height();
    width = r.width();
    std::vector<double> plane(height * width, 0.0);
    for (std::size_t c = 0; c < r.channels(); ++c)
      for (std::size_t i = 0; i < plane.size(); ++i) plane[i] += r[c * plane.size() + i];
    return plane;
  }
  height = 1;
  width = r.size();
  return r.values();
}

void render_heatmap(const RelevanceMap& map, std::optional<LayerId> layer, const std::filesystem::path& out) {
  std::size_t h = 0, w = 0;
  const std::vector<double> plane = relevance_plane(map.at(layer), h, w);
  double peak = 0.0;
  for (double v : plane) peak = std::max(peak, std::abs(v));
  std::vector<Rgb> px(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const double t = peak > 0.0 ? plane[i] / peak : 0.0;
    const auto fade = [](double u) { return static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - u))); };
    if (t >= 0.0) {
      px[i] = {255, fade(t), fade(t)};
    } else {
      px[i] = {fade(-t), fade(-t), 255};
    }
  }
  write_ppm(h, w, px, out);

  std::filesystem::path side = out;
  side += ".txt";
  std::ofstream txt(side);
  if (!txt) throw IoError("cannot write heatmap sidecar " + side.string());
  txt << std::setprecision(17);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) txt << (x ? " " : "") << plane[y * w + x];
    txt << '\n';
  }
  if (!txt) throw IoError("write failed: " + side.string());
}

std::vector<double> read_sidecar(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read sidecar " + path.string());
  std::vector<double> values;
  std::string line;
  height = 0;
  width = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t n = 0;
    double v;
    while (ls >> v) {
      values.push_back(v);
      ++n;
    }
    if (height == 0) width = n;
    if (n != width) throw IoError("sidecar rows have unequal length: " + path.string());
    ++height;
  }
  return values;
}

}  // namespace nstaug
