#include "gmlfm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gmlfm::model {

namespace {
constexpr double kCosineEps = 1e-12;
}

std::string_view to_string(DistanceKind kind) {
  switch (kind) {
    case DistanceKind::Inner: return "inner";
    case DistanceKind::Euclidean: return "euclidean";
    case DistanceKind::Mahalanobis: return "mahalanobis";
    case DistanceKind::Dnn: return "dnn";
    case DistanceKind::Manhattan: return "manhattan";
    case DistanceKind::Chebyshev: return "chebyshev";
    case DistanceKind::Cosine: return "cosine";
  }
  return "unknown";
}

std::optional<DistanceKind> parse_distance_kind(std::string_view name) {
  for (DistanceKind k : kAllKinds)
    if (to_string(k) == name) return k;
  return std::nullopt;
}

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::W0: return "w0";
    case ParamGroup::W: return "w";
    case ParamGroup::V: return "V";
    case ParamGroup::H: return "h";
    case ParamGroup::L: return "L";
    case ParamGroup::MlpW: return "W_l";
    case ParamGroup::MlpB: return "b_l";
  }
  return "unknown";
}

std::optional<double> DistanceSpec::minkowski_p() const {
  switch (kind) {
    case DistanceKind::Manhattan: return 1.0;
    case DistanceKind::Chebyshev: return std::numeric_limits<double>::infinity();
    case DistanceKind::Euclidean:
    case DistanceKind::Mahalanobis:
    case DistanceKind::Dnn: return 2.0;
    default: return std::nullopt;
  }
}

void DistanceSpec::validate() const {
  if (layers < 0) throw ModelError("layers must be >= 0");
  switch (kind) {
    case DistanceKind::Dnn:
      if (layers < 1) throw ModelError("dnn distance requires layers >= 1");
      break;
    case DistanceKind::Inner:
    case DistanceKind::Euclidean:
    case DistanceKind::Mahalanobis:
      if (layers != 0)
        throw ModelError(std::string(to_string(kind)) + " distance requires layers = 0");
      break;
    default:
      break;
  }
}

bool DistanceSpec::has_fast_path() const {
  return use_weight && (kind == DistanceKind::Euclidean || kind == DistanceKind::Mahalanobis ||
                        kind == DistanceKind::Dnn);
}

std::string to_string(const DistanceSpec& spec) {
  return std::string(to_string(spec.kind)) + " weight=" + (spec.use_weight ? "on" : "off") +
         " layers=" + std::to_string(spec.layers);
}

ModelParams ModelParams::zeros(std::size_t n, std::size_t k, const DistanceSpec& spec) {
  spec.validate();
  if (k < 1) throw ModelError("embedding size k must be >= 1");
  ModelParams p;
  p.w.assign(n, 0.0);
  p.V = Matrix(n, k);
  p.h.assign(k, 0.0);
  if (spec.kind == DistanceKind::Mahalanobis) p.L = Matrix(k, k);
  for (int l = 0; l < spec.layers; ++l) p.mlp.push_back({Matrix(k, k), std::vector<double>(k, 0.0)});
  return p;
}

void ModelParams::validate(const DistanceSpec& spec) const {
  spec.validate();
  const std::size_t kk = k();
  if (kk < 1) throw ModelError("embedding size k must be >= 1");
  if (w.size() != n()) throw ModelError("linear weights do not match n");
  if (h.size() != kk) throw ModelError("h does not match k");
  const bool need_l = spec.kind == DistanceKind::Mahalanobis;
  if (need_l && (L.rows() != kk || L.cols() != kk)) throw ModelError("L must be k x k");
  if (!need_l && !L.empty()) throw ModelError("L is only used by the mahalanobis distance");
  if (mlp.size() != static_cast<std::size_t>(spec.layers))
    throw ModelError("mlp depth does not match layer count");
  auto finite = [](std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
  };
  bool ok = std::isfinite(w0) && finite(w) && finite(V.data()) && finite(h) && finite(L.data());
  for (const auto& layer : mlp) {
    if (layer.weight.rows() != kk || layer.weight.cols() != kk || layer.bias.size() != kk)
      throw ModelError("mlp layers must be k x k with k biases");
    ok = ok && finite(layer.weight.data()) && finite(layer.bias);
  }
  if (!ok) throw ModelError("parameters contain non-finite values");
}

DropoutMasks DropoutMasks::sample(std::size_t active, int layers, std::size_t k, double rate,
                                  std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ModelError("dropout rate must be in [0, 1)");
  DropoutMasks out;
  if (rate == 0.0 || layers < 2) return out;
  out.gaps_ = static_cast<std::size_t>(layers - 1);
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  out.masks_.resize(active * out.gaps_);
  for (auto& mask : out.masks_) {
    mask.resize(k);
    for (auto& m : mask) m = keep(rng) ? scale : 0.0;
  }
  return out;
}

std::vector<double> transform_mlp(std::span<const double> v, std::span<const MlpLayer> mlp,
                                  const DropoutMasks* masks, std::size_t position) {
  std::vector<double> cur(v.begin(), v.end());
  std::vector<double> next(cur.size());
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    matvec(mlp[l].weight, cur, next);
    for (std::size_t r = 0; r < next.size(); ++r) next[r] = std::tanh(next[r] + mlp[l].bias[r]);
    if (masks && !masks->empty() && l + 1 < mlp.size()) {
      const auto mask = masks->get(position, l);
      for (std::size_t r = 0; r < next.size(); ++r) next[r] *= mask[r];
    }
    std::swap(cur, next);
  }
  return cur;
}

std::vector<double> transform_mlp(std::span<const double> v, std::span<const MlpLayer> mlp,
                                  bool train, double dropout_rate, std::mt19937_64& rng) {
  if (!train) return transform_mlp(v, mlp);
  const auto masks =
      DropoutMasks::sample(1, static_cast<int>(mlp.size()), v.size(), dropout_rate, rng);
  return transform_mlp(v, mlp, &masks, 0);
}

namespace {

bool uses_mlp(const DistanceSpec& spec) { return spec.layers > 0; }

std::vector<double> project(const DistanceSpec& spec, const ModelParams& params,
                            std::span<const double> v, const DropoutMasks* masks,
                            std::size_t position) {
  if (spec.kind == DistanceKind::Mahalanobis) return matvec(params.L, v);
  if (uses_mlp(spec)) return transform_mlp(v, params.mlp, masks, position);
  return {v.begin(), v.end()};
}

/// Distance between already-projected vectors.
double compare(DistanceKind kind, std::span<const double> p, std::span<const double> q) {
  switch (kind) {
    case DistanceKind::Inner: return dot(p, q);
    case DistanceKind::Cosine:
      return dot(p, q) / (std::sqrt(dot(p, p)) * std::sqrt(dot(q, q)) + kCosineEps);
    case DistanceKind::Manhattan: {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
      return s;
    }
    case DistanceKind::Chebyshev: {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) s = std::max(s, std::abs(p[i] - q[i]));
      return s;
    }
    default: {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - q[i]) * (p[i] - q[i]);
      return s;
    }
  }
}

std::vector<double> difference(std::span<const double> a, std::span<const double> b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

double linear_part(const ModelParams& params, ActiveSet active) {
  double y = params.w0;
  for (const auto& e : active) y += params.w[e.index] * e.value;
  return y;
}

}  // namespace

double distance(const DistanceSpec& spec, std::span<const double> vi, std::span<const double> vj,
                const ModelParams& params) {
  if (vi.size() != vj.size()) throw ModelError("distance: dimension mismatch");
  if (spec.kind == DistanceKind::Mahalanobis)
    return quadratic_form(psd_from_factor(params.L), difference(vi, vj));
  return compare(spec.kind, project(spec, params, vi, nullptr, 0),
                 project(spec, params, vj, nullptr, 0));
}

Matrix psd_from_factor(const Matrix& L) { return gram(L); }

double transformation_weight(std::span<const double> h, std::span<const double> vi,
                             std::span<const double> vj) {
  double s = 0.0;
  for (std::size_t f = 0; f < h.size(); ++f) s += h[f] * vi[f] * vj[f];
  return s;
}

double predict_naive(const ModelParams& params, ActiveSet active, const DistanceSpec& spec,
                     const DropoutMasks* masks) {
  spec.validate();
  double y = linear_part(params, active);
  Matrix M;
  if (spec.kind == DistanceKind::Mahalanobis) M = psd_from_factor(params.L);
  for (std::size_t i = 0; i < active.size(); ++i) {
    const auto vi = params.V.row(active[i].index);
    for (std::size_t j = i + 1; j < active.size(); ++j) {
      const auto vj = params.V.row(active[j].index);
      double d = 0.0;
      if (spec.kind == DistanceKind::Mahalanobis) {
        d = quadratic_form(M, difference(vi, vj));
      } else {
        d = compare(spec.kind, project(spec, params, vi, masks, i),
                    project(spec, params, vj, masks, j));
      }
      const double wij = spec.use_weight ? transformation_weight(params.h, vi, vj) : 1.0;
      y += wij * d * active[i].value * active[j].value;
    }
  }
  return y;
}

double second_order_mahalanobis_fast(ActiveSet active, const Matrix& V, const Matrix& M,
                                     std::span<const double> h) {
  const std::size_t k = V.cols();
  std::vector<double> sum_v(k, 0.0);    // sum_j x_j v_j
  std::vector<double> sum_hvq(k, 0.0);  // sum_i x_i diag(h) v_i (v_i^T M v_i)
  Matrix outer_sum(k, k);               // sum_i x_i v_i v_i^T
  for (const auto& e : active) {
    const auto v = V.row(e.index);
    const double q = quadratic_form(M, v) * e.value;
    for (std::size_t f = 0; f < k; ++f) {
      sum_v[f] += e.value * v[f];
      sum_hvq[f] += h[f] * v[f] * q;
      const double xv = e.value * v[f];
      for (std::size_t g = 0; g < k; ++g) outer_sum(f, g) += xv * v[g];
    }
  }
  double second = 0.0;
  for (const auto& e : active) {
    const auto v = V.row(e.index);
    const auto mv = matvec(M, v);
    double s = 0.0;
    for (std::size_t f = 0; f < k; ++f) s += h[f] * v[f] * dot(outer_sum.row(f), mv);
    second += s * e.value;
  }
  return dot(sum_v, sum_hvq) - second;
}

double second_order_dnn_fast(ActiveSet active, const Matrix& V, const Matrix& transformed,
                             std::span<const double> h) {
  const std::size_t k = V.cols();
  const std::size_t kt = transformed.cols();
  std::vector<double> sum_v(k, 0.0);
  std::vector<double> sum_hvq(k, 0.0);
  Matrix outer_sum(k, kt);  // sum_i x_i v_i vhat_i^T
  for (std::size_t r = 0; r < active.size(); ++r) {
    const double x = active[r].value;
    const auto v = V.row(active[r].index);
    const auto vh = transformed.row(r);
    const double q = dot(vh, vh) * x;
    for (std::size_t f = 0; f < k; ++f) {
      sum_v[f] += x * v[f];
      sum_hvq[f] += h[f] * v[f] * q;
      const double xv = x * v[f];
      auto row = outer_sum.row(f);
      for (std::size_t g = 0; g < kt; ++g) row[g] += xv * vh[g];
    }
  }
  double second = 0.0;
  for (std::size_t r = 0; r < active.size(); ++r) {
    const auto v = V.row(active[r].index);
    const auto vh = transformed.row(r);
    double s = 0.0;
    for (std::size_t f = 0; f < k; ++f) s += h[f] * v[f] * dot(outer_sum.row(f), vh);
    second += s * active[r].value;
  }
  return dot(sum_v, sum_hvq) - second;
}

double predict(const ModelParams& params, ActiveSet active, const DistanceSpec& spec,
               const DropoutMasks* masks) {
  if (!spec.has_fast_path()) return predict_naive(params, active, spec, masks);
  const double linear = linear_part(params, active);
  if (active.size() < 2) return linear;
  const std::size_t k = params.k();
  Matrix transformed(active.size(), k);
  for (std::size_t r = 0; r < active.size(); ++r) {
    const auto v = params.V.row(active[r].index);
    auto out = transformed.row(r);
    switch (spec.kind) {
      case DistanceKind::Mahalanobis:
        // v^T L^T L v' = (L v) . (L v')
        matvec(params.L, v, out);
        break;
      case DistanceKind::Dnn: {
        const auto t = transform_mlp(v, params.mlp, masks, r);
        std::copy(t.begin(), t.end(), out.begin());
        break;
      }
      default:
        std::copy(v.begin(), v.end(), out.begin());
        break;
    }
  }
  return linear + second_order_dnn_fast(active, params.V, transformed, params.h);
}

double vanilla_fm_predict(const ModelParams& params, ActiveSet active) {
  double y = linear_part(params, active);
  const std::size_t k = params.k();
  double second = 0.0;
  for (std::size_t f = 0; f < k; ++f) {
    double sum = 0.0;
    double sum_sq = 0.0;
    for (const auto& e : active) {
      const double t = params.V(e.index, f) * e.value;
      sum += t;
      sum_sq += t * t;
    }
    second += sum * sum - sum_sq;
  }
  return y + 0.5 * second;
}

namespace {

tape::LeafKey key(ParamGroup g, std::size_t index = 0) {
  return {static_cast<int>(g), static_cast<int>(index)};
}

tape::Shape vec_shape(std::size_t k) { return {static_cast<std::uint32_t>(k), 1}; }

tape::Shape mat_shape(const Matrix& m) {
  return {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
}

}  // namespace

tape::NodeId record_prediction(tape::Tape& t, const ModelParams& params, ActiveSet active,
                               const DistanceSpec& spec, const DropoutMasks* masks) {
  spec.validate();
  const std::size_t k = params.k();
  const std::size_t m = active.size();

  tape::NodeId y = t.parameter(key(ParamGroup::W0), std::span<const double>(&params.w0, 1), {});
  std::vector<tape::NodeId> v(m);
  std::vector<tape::NodeId> x(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto idx = active[i].index;
    x[i] = t.constant(active[i].value);
    const auto wi = t.parameter(key(ParamGroup::W, idx), std::span<const double>(&params.w[idx], 1), {});
    y = t.add(y, t.scale(wi, x[i]));
    v[i] = t.parameter(key(ParamGroup::V, idx), params.V.row(idx), vec_shape(k));
  }
  if (m < 2) return y;

  std::optional<tape::NodeId> h;
  if (spec.use_weight) h = t.parameter(key(ParamGroup::H), params.h, vec_shape(k));

  // Projected embeddings: L v, the MLP output, or v itself.
  std::vector<tape::NodeId> p(m);
  if (spec.kind == DistanceKind::Mahalanobis) {
    const auto L = t.parameter(key(ParamGroup::L), params.L.data(), mat_shape(params.L));
    for (std::size_t i = 0; i < m; ++i) p[i] = t.matvec(L, v[i]);
  } else if (uses_mlp(spec)) {
    std::vector<tape::NodeId> W;
    std::vector<tape::NodeId> b;
    for (std::size_t l = 0; l < params.mlp.size(); ++l) {
      W.push_back(t.parameter(key(ParamGroup::MlpW, l), params.mlp[l].weight.data(),
                              mat_shape(params.mlp[l].weight)));
      b.push_back(t.parameter(key(ParamGroup::MlpB, l), params.mlp[l].bias, vec_shape(k)));
    }
    for (std::size_t i = 0; i < m; ++i) {
      tape::NodeId cur = v[i];
      for (std::size_t l = 0; l < W.size(); ++l) {
        cur = t.tanh(t.add(t.matvec(W[l], cur), b[l]));
        if (masks && !masks->empty() && l + 1 < W.size())
          cur = t.mul(cur, t.constant(masks->get(i, l), vec_shape(k)));
      }
      p[i] = cur;
    }
  } else {
    p = v;
  }

  if (spec.has_fast_path()) {
    tape::NodeId sum_v = t.scale(v[0], x[0]);
    tape::NodeId sum_hvq = t.scale(t.mul(*h, v[0]), t.mul(t.dot(p[0], p[0]), x[0]));
    tape::NodeId outer_sum = t.scale(t.outer(v[0], p[0]), x[0]);
    for (std::size_t i = 1; i < m; ++i) {
      sum_v = t.add(sum_v, t.scale(v[i], x[i]));
      sum_hvq = t.add(sum_hvq, t.scale(t.mul(*h, v[i]), t.mul(t.dot(p[i], p[i]), x[i])));
      outer_sum = t.add(outer_sum, t.scale(t.outer(v[i], p[i]), x[i]));
    }
    tape::NodeId second = t.dot(sum_v, sum_hvq);
    for (std::size_t j = 0; j < m; ++j) {
      const auto cross = t.dot(t.mul(*h, v[j]), t.matvec(outer_sum, p[j]));
      second = t.sub(second, t.mul(cross, x[j]));
    }
    return t.add(y, second);
  }

  std::vector<tape::NodeId> norms;
  if (spec.kind == DistanceKind::Cosine)
    for (std::size_t i = 0; i < m; ++i) norms.push_back(t.sqrt(t.dot(p[i], p[i])));
  const auto eps = spec.kind == DistanceKind::Cosine ? t.constant(kCosineEps) : tape::NodeId{};

  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      tape::NodeId d;
      switch (spec.kind) {
        case DistanceKind::Inner: d = t.dot(p[i], p[j]); break;
        case DistanceKind::Cosine:
          d = t.div(t.dot(p[i], p[j]), t.add(t.mul(norms[i], norms[j]), eps));
          break;
        case DistanceKind::Manhattan: d = t.sum(t.abs(t.sub(p[i], p[j]))); break;
        case DistanceKind::Chebyshev: d = t.max_select(t.abs(t.sub(p[i], p[j]))); break;
        default: {
          const auto diff = t.sub(p[i], p[j]);
          d = t.dot(diff, diff);
          break;
        }
      }
      if (h) d = t.mul(d, t.dot(*h, t.mul(v[i], v[j])));
      y = t.add(y, t.mul(d, t.mul(x[i], x[j])));
    }
  }
  return y;
}

FlatLayout flat_layout(const ModelParams& params) {
  FlatLayout layout;
  auto push = [&](ParamGroup g, std::size_t count) {
    layout.ranges.push_back({g, layout.size, layout.size + count});
    layout.size += count;
  };
  const std::size_t k = params.k();
  push(ParamGroup::W0, 1);
  push(ParamGroup::W, params.w.size());
  push(ParamGroup::V, params.V.data().size());
  push(ParamGroup::H, params.h.size());
  push(ParamGroup::L, params.L.data().size());
  push(ParamGroup::MlpW, params.mlp.size() * k * k);
  push(ParamGroup::MlpB, params.mlp.size() * k);
  return layout;
}

std::vector<double> flatten(const ModelParams& params) {
  std::vector<double> out;
  out.reserve(flat_layout(params).size);
  out.push_back(params.w0);
  out.insert(out.end(), params.w.begin(), params.w.end());
  out.insert(out.end(), params.V.data().begin(), params.V.data().end());
  out.insert(out.end(), params.h.begin(), params.h.end());
  out.insert(out.end(), params.L.data().begin(), params.L.data().end());
  for (const auto& l : params.mlp) out.insert(out.end(), l.weight.data().begin(), l.weight.data().end());
  for (const auto& l : params.mlp) out.insert(out.end(), l.bias.begin(), l.bias.end());
  return out;
}

void unflatten(std::span<const double> flat, ModelParams& params) {
  if (flat.size() != flat_layout(params).size) throw ModelError("unflatten: size mismatch");
  auto it = flat.begin();
  auto take = [&](auto& dst) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
    it += static_cast<std::ptrdiff_t>(dst.size());
  };
  params.w0 = *it++;
  take(params.w);
  take(params.V.data());
  take(params.h);
  take(params.L.data());
  for (auto& l : params.mlp) take(l.weight.data());
  for (auto& l : params.mlp) take(l.bias);
}

std::vector<double> flatten_gradient(const tape::GradientMap& grads, const ModelParams& params) {
  const FlatLayout layout = flat_layout(params);
  std::vector<double> out(layout.size, 0.0);
  const std::size_t k = params.k();
  for (const auto& e : grads.entries()) {
    const auto group = static_cast<ParamGroup>(e.key.group);
    std::size_t begin = layout.ranges[static_cast<std::size_t>(e.key.group)].begin;
    const auto idx = static_cast<std::size_t>(e.key.index);
    switch (group) {
      case ParamGroup::W: begin += idx; break;
      case ParamGroup::V: begin += idx * k; break;
      case ParamGroup::MlpW: begin += idx * k * k; break;
      case ParamGroup::MlpB: begin += idx * k; break;
      default: break;
    }
    for (std::size_t i = 0; i < e.grad.size(); ++i) out[begin + i] += e.grad[i];
  }
  return out;
}

}  // namespace gmlfm::model
