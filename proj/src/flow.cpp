#include "rope/flow.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "rope/rng.hpp"

namespace rope {

namespace {

constexpr double kLogScaleClamp = 7.0;  // log-scales squashed into [-7, 7]
constexpr double kInf = std::numeric_limits<double>::infinity();

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double soft_clamp(double raw) { return kLogScaleClamp * std::tanh(raw / kLogScaleClamp); }

std::vector<int> default_nse_hidden(Task task) {
  switch (task) {
    case Task::pendulum:
      return {256, 128, 32};
    default:
      return {64, 64, 32};
  }
}

// Layer t of every block conditions on the t preceding coordinates in the
// block's ordering; blocks alternate between the natural and reversed order.
std::vector<int> layer_order(int layer, int k) {
  std::vector<int> order(static_cast<std::size_t>(k));
  for (int t = 0; t < k; ++t) order[static_cast<std::size_t>(t)] = layer % 2 == 0 ? t : k - 1 - t;
  return order;
}

}  // namespace

int Mlp::in_dim() const { return static_cast<int>(layers.front().weight.shape()[0]); }
int Mlp::out_dim() const { return static_cast<int>(layers.back().weight.shape()[1]); }

Mlp make_mlp(std::span<const int> dims, std::mt19937_64& rng, bool zero_output_layer) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output dims");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i], out = dims[i + 1];
    const bool last = i + 2 == dims.size();
    std::vector<double> w(static_cast<std::size_t>(in) * static_cast<std::size_t>(out), 0.0);
    if (!(last && zero_output_layer)) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(in));
      for (auto& v : w) v = std_dev * standard_normal(rng);
    }
    DenseLayer layer;
    layer.weight = ad::Tensor::from_data({in, out}, std::move(w), /*requires_grad=*/true);
    layer.bias = ad::Tensor::zeros({out}, /*requires_grad=*/true);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

ad::Tensor mlp_apply(const Mlp& mlp, const ad::Tensor& x) {
  ad::Tensor h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    h = ad::add(ad::matmul(h, mlp.layers[i].weight), mlp.layers[i].bias);
    if (i + 1 < mlp.layers.size()) h = ad::relu(h);
  }
  return h;
}

std::vector<double> mlp_apply_raw(const Mlp& mlp, std::span<const double> x, std::int64_t n) {
  const int in = mlp.in_dim();
  if (x.size() != static_cast<std::size_t>(n * in))
    throw std::invalid_argument("mlp_apply_raw: input size mismatch");
  EigenRowMat h = Eigen::Map<const EigenRowMat>(x.data(), n, in);
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& layer = mlp.layers[i];
    const std::int64_t rows_in = layer.weight.shape()[0], cols_out = layer.weight.shape()[1];
    Eigen::Map<const EigenRowMat> w(layer.weight.data().data(), rows_in, cols_out);
    Eigen::Map<const Eigen::RowVectorXd> b(layer.bias.data().data(), cols_out);
    h = (h * w).rowwise() + b;
    if (i + 1 < mlp.layers.size()) h = h.cwiseMax(0.0);
  }
  return {h.data(), h.data() + h.size()};
}

ad::Tensor nse_apply(const NseParams& nse, const ad::Tensor& x) {
  if (x.cols() != nse.input_dim())
    throw std::invalid_argument("nse_apply: observation width " + std::to_string(x.cols()) +
                                " does not match input dim " + std::to_string(nse.input_dim()));
  ad::Tensor h = x;
  if (!nse.input_shift.empty()) {
    const auto d = static_cast<std::int64_t>(nse.input_shift.size());
    auto shift = ad::Tensor::from_data({d}, nse.input_shift);
    std::vector<double> inv(nse.input_scale.size());
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / nse.input_scale[i];
    auto inv_scale = ad::Tensor::from_data({d}, std::move(inv));
    h = ad::mul(ad::sub(h, shift), inv_scale);
  }
  return mlp_apply(nse.net, h);
}

std::vector<double> nse_apply_raw(const NseParams& nse, std::span<const double> x,
                                  std::int64_t n) {
  const int d = nse.input_dim();
  if (x.size() != static_cast<std::size_t>(n * d))
    throw std::invalid_argument("nse_apply_raw: input size mismatch");
  std::vector<double> normed(x.begin(), x.end());
  if (!nse.input_shift.empty()) {
    for (std::int64_t i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        auto& v = normed[static_cast<std::size_t>(i * d + j)];
        v = (v - nse.input_shift[static_cast<std::size_t>(j)]) /
            nse.input_scale[static_cast<std::size_t>(j)];
      }
  }
  return mlp_apply_raw(nse.net, normed, n);
}

std::vector<ad::Tensor> FlowModel::parameters() const {
  std::vector<ad::Tensor> params;
  for (const auto& layer : nse.net.layers) {
    params.push_back(layer.weight);
    params.push_back(layer.bias);
  }
  for (const auto& block : conditioners)
    for (const auto& mlp : block)
      for (const auto& layer : mlp.layers) {
        params.push_back(layer.weight);
        params.push_back(layer.bias);
      }
  return params;
}

void FlowModel::zero_grad() const {
  for (auto p : parameters()) p.zero_grad();
}

std::vector<std::vector<double>> FlowModel::snapshot_values() const {
  std::vector<std::vector<double>> snap;
  for (const auto& p : parameters()) snap.emplace_back(p.data().begin(), p.data().end());
  return snap;
}

void FlowModel::restore_values(const std::vector<std::vector<double>>& snap) const {
  auto params = parameters();
  if (snap.size() != params.size())
    throw std::invalid_argument("restore_values: snapshot does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_data();
    if (snap[i].size() != dst.size())
      throw std::invalid_argument("restore_values: parameter size changed");
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

FlowModel make_bare_flow(int theta_dim, int summary_dim, std::uint64_t seed,
                         const FlowArch& arch, std::vector<double> lo, std::vector<double> hi) {
  if (theta_dim < 1 || summary_dim < 1)
    throw std::invalid_argument("make_bare_flow: dimensions must be positive");
  FlowModel m;
  m.theta_dim = theta_dim;
  m.summary_dim = summary_dim;
  m.n_layers = arch.n_layers;
  m.theta_lo = std::move(lo);
  m.theta_hi = std::move(hi);
  if (!arch.conditioner_hidden_per_dim.empty() &&
      arch.conditioner_hidden_per_dim.size() != static_cast<std::size_t>(theta_dim))
    throw std::invalid_argument("make_bare_flow: per-dim conditioner sizes do not match theta_dim");
  auto rng = make_rng(seed, 21);
  for (int layer = 0; layer < arch.n_layers; ++layer) {
    const auto order = layer_order(layer, theta_dim);
    std::vector<Mlp> block;
    for (int t = 0; t < theta_dim; ++t) {
      const int handled_dim = order[static_cast<std::size_t>(t)];
      const std::vector<int>& hidden =
          arch.conditioner_hidden_per_dim.empty()
              ? arch.conditioner_hidden
              : arch.conditioner_hidden_per_dim[static_cast<std::size_t>(handled_dim)];
      std::vector<int> dims{t + summary_dim};
      dims.insert(dims.end(), hidden.begin(), hidden.end());
      dims.push_back(2);
      block.push_back(make_mlp(dims, rng, /*zero_output_layer=*/true));
    }
    m.conditioners.push_back(std::move(block));
  }
  return m;
}

FlowModel make_flow_model(Task task, std::uint64_t seed, const FlowArch& arch,
                          std::int64_t n_whiten) {
  const TaskSpec& spec = task_spec(task);
  FlowModel m = make_bare_flow(spec.theta_dim, spec.summary_dim, seed, arch, spec.theta_lo,
                               spec.theta_hi);
  m.task = task;

  auto rng = make_rng(seed, 22);
  std::vector<int> dims{spec.obs_dim};
  const auto hidden = arch.nse_hidden.empty() ? default_nse_hidden(task) : arch.nse_hidden;
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(spec.summary_dim);
  m.nse.net = make_mlp(dims, rng);

  if (n_whiten > 0) {
    const std::size_t d = static_cast<std::size_t>(spec.obs_dim);
    std::vector<double> mean(d, 0.0), m2(d, 0.0);
    for (std::int64_t i = 0; i < n_whiten; ++i) {
      const auto theta = prior_sample(task, mix_seed(mix_seed(seed, 23), static_cast<std::uint64_t>(i)));
      const auto obs = simulate(task, theta.values,
                                mix_seed(mix_seed(seed, 24), static_cast<std::uint64_t>(i)), false);
      for (std::size_t j = 0; j < d; ++j) {
        const double delta = obs.values[j] - mean[j];
        mean[j] += delta / static_cast<double>(i + 1);
        m2[j] += delta * (obs.values[j] - mean[j]);
      }
    }
    m.nse.input_shift = mean;
    m.nse.input_scale.resize(d);
    for (std::size_t j = 0; j < d; ++j)
      m.nse.input_scale[j] =
          std::max(1e-8, std::sqrt(m2[j] / static_cast<double>(std::max<std::int64_t>(1, n_whiten - 1))));
  }
  return m;
}

void standardize_summaries(FlowModel& m, std::span<const double> obs, std::int64_t n) {
  if (m.nse.net.layers.empty())
    throw std::invalid_argument("standardize_summaries: model has no statistic estimator");
  const int l = m.summary_dim;
  const auto h = nse_apply_raw(m.nse, obs, n);
  std::vector<double> mean(static_cast<std::size_t>(l), 0.0), stddev(static_cast<std::size_t>(l), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (int c = 0; c < l; ++c) mean[static_cast<std::size_t>(c)] += h[static_cast<std::size_t>(i * l + c)];
  for (auto& v : mean) v /= static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i)
    for (int c = 0; c < l; ++c) {
      const double d = h[static_cast<std::size_t>(i * l + c)] - mean[static_cast<std::size_t>(c)];
      stddev[static_cast<std::size_t>(c)] += d * d;
    }
  for (auto& v : stddev) v = std::max(1e-8, std::sqrt(v / static_cast<double>(std::max<std::int64_t>(1, n - 1))));

  // new_summary = (old - mean) / std, folded into the output layer
  auto& last = m.nse.net.layers.back();
  auto w = last.weight.mutable_data();
  auto b = last.bias.mutable_data();
  const std::int64_t rows = last.weight.shape()[0];
  for (std::int64_t r = 0; r < rows; ++r)
    for (int c = 0; c < l; ++c) w[static_cast<std::size_t>(r * l + c)] /= stddev[static_cast<std::size_t>(c)];
  for (int c = 0; c < l; ++c)
    b[static_cast<std::size_t>(c)] = (b[static_cast<std::size_t>(c)] - mean[static_cast<std::size_t>(c)]) / stddev[static_cast<std::size_t>(c)];

  // conditioners see old = new * std + mean through their first layer
  for (auto& block : m.conditioners)
    for (std::size_t t = 0; t < block.size(); ++t) {
      auto& first = block[t].layers.front();
      auto w1 = first.weight.mutable_data();
      auto b1 = first.bias.mutable_data();
      const std::int64_t in = first.weight.shape()[0];
      const std::int64_t out = first.weight.shape()[1];
      const std::int64_t summary_offset = in - l;  // inputs are [theta_prefix, summary]
      for (int c = 0; c < l; ++c)
        for (std::int64_t o = 0; o < out; ++o) {
          auto& wv = w1[static_cast<std::size_t>((summary_offset + c) * out + o)];
          b1[static_cast<std::size_t>(o)] += wv * mean[static_cast<std::size_t>(c)];
          wv *= stddev[static_cast<std::size_t>(c)];
        }
    }
}

// ---------------------------------------------------------------------------
// Density (tape-aware)

ad::Tensor flow_log_prob_tensor(const FlowModel& m, const ad::Tensor& theta,
                                const ad::Tensor& summary) {
  const int k = m.theta_dim;
  const std::int64_t n = theta.rows();
  if (theta.cols() != k || summary.rows() != n || summary.cols() != m.summary_dim)
    throw std::invalid_argument("flow_log_prob: shape mismatch between theta and summaries");

  ad::Tensor logdet = ad::Tensor::zeros({n, 1});
  std::vector<ad::Tensor> cols;
  cols.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    ad::Tensor col = ad::slice_cols(theta, j, j + 1);
    if (!m.theta_lo.empty()) {
      const double lo = m.theta_lo[static_cast<std::size_t>(j)];
      const double width = m.theta_hi[static_cast<std::size_t>(j)] - lo;
      // s in (0,1); z = logit(s); d z / d theta = 1 / (width s (1-s)).
      ad::Tensor s = ad::scale(ad::add_const(col, -lo), 1.0 / width);
      ad::Tensor log_s = ad::log_op(s);
      ad::Tensor log_1ms = ad::log_op(ad::add_const(ad::neg(s), 1.0));
      col = ad::sub(log_s, log_1ms);
      logdet = ad::sub(logdet, ad::add_const(ad::add(log_s, log_1ms), std::log(width)));
    }
    cols.push_back(col);
  }

  for (int layer = 0; layer < m.n_layers; ++layer) {
    const auto order = layer_order(layer, k);
    std::vector<ad::Tensor> y(static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) y[static_cast<std::size_t>(t)] = cols[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])];
    std::vector<ad::Tensor> out(static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) {
      ad::Tensor input;
      if (t == 0) {
        input = summary;
      } else {
        std::vector<ad::Tensor> parts(y.begin(), y.begin() + t);
        parts.push_back(summary);
        input = ad::concat_cols(parts);
      }
      ad::Tensor shift_scale = mlp_apply(m.conditioners[static_cast<std::size_t>(layer)][static_cast<std::size_t>(t)], input);
      ad::Tensor shift = ad::slice_cols(shift_scale, 0, 1);
      ad::Tensor log_scale = ad::scale(
          ad::tanh_op(ad::scale(ad::slice_cols(shift_scale, 1, 2), 1.0 / kLogScaleClamp)),
          kLogScaleClamp);
      out[static_cast<std::size_t>(t)] =
          ad::mul(ad::sub(y[static_cast<std::size_t>(t)], shift), ad::exp_op(ad::neg(log_scale)));
      logdet = ad::sub(logdet, log_scale);
    }
    for (int t = 0; t < k; ++t) cols[static_cast<std::size_t>(t)] = out[static_cast<std::size_t>(t)];
  }

  ad::Tensor sq = ad::square(cols[0]);
  for (int t = 1; t < k; ++t) sq = ad::add(sq, ad::square(cols[static_cast<std::size_t>(t)]));
  const double log_norm = -0.5 * static_cast<double>(k) * std::log(2.0 * std::numbers::pi);
  return ad::add_const(ad::add(ad::scale(sq, -0.5), logdet), log_norm);
}

std::vector<double> flow_log_prob(const FlowModel& m, std::span<const double> theta,
                                  std::span<const double> summary, std::int64_t n) {
  const int k = m.theta_dim, l = m.summary_dim;
  if (theta.size() != static_cast<std::size_t>(n * k) ||
      summary.size() != static_cast<std::size_t>(n * l))
    throw std::invalid_argument("flow_log_prob: input size mismatch");
  std::vector<double> result(static_cast<std::size_t>(n), -kInf);
  std::vector<std::int64_t> interior;
  interior.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    bool inside = true;
    if (!m.theta_lo.empty())
      for (int j = 0; j < k && inside; ++j) {
        const double v = theta[static_cast<std::size_t>(i * k + j)];
        inside = v > m.theta_lo[static_cast<std::size_t>(j)] && v < m.theta_hi[static_cast<std::size_t>(j)];
      }
    if (inside) interior.push_back(i);
  }
  if (interior.empty()) return result;

  std::vector<double> theta_in(interior.size() * static_cast<std::size_t>(k));
  std::vector<double> summary_in(interior.size() * static_cast<std::size_t>(l));
  for (std::size_t r = 0; r < interior.size(); ++r) {
    std::copy_n(theta.begin() + interior[r] * k, k, theta_in.begin() + static_cast<std::ptrdiff_t>(r) * k);
    std::copy_n(summary.begin() + interior[r] * l, l,
                summary_in.begin() + static_cast<std::ptrdiff_t>(r) * l);
  }
  ad::NoGradGuard no_grad;
  const auto nn = static_cast<std::int64_t>(interior.size());
  auto lp = flow_log_prob_tensor(m, ad::Tensor::from_data({nn, k}, std::move(theta_in)),
                                 ad::Tensor::from_data({nn, l}, std::move(summary_in)));
  for (std::size_t r = 0; r < interior.size(); ++r)
    result[static_cast<std::size_t>(interior[r])] = lp.data()[r];
  return result;
}

// ---------------------------------------------------------------------------
// Transforms (plain buffers; used by sampling and round-trip checks)

namespace {

struct CondOut {
  double shift, log_scale;
};

// Conditioner output for every row given the first `t` block coordinates.
std::vector<CondOut> conditioner_raw(const FlowModel& m, int layer, int t,
                                     const std::vector<std::vector<double>>& y,
                                     std::span<const double> summary, std::int64_t n) {
  const int l = m.summary_dim;
  const int width = t + l;
  std::vector<double> input(static_cast<std::size_t>(n * width));
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = input.data() + i * width;
    for (int c = 0; c < t; ++c) row[c] = y[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
    std::copy_n(summary.begin() + i * l, l, row + t);
  }
  const auto out = mlp_apply_raw(m.conditioners[static_cast<std::size_t>(layer)][static_cast<std::size_t>(t)], input, n);
  std::vector<CondOut> res(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    res[static_cast<std::size_t>(i)] = {out[static_cast<std::size_t>(2 * i)],
                                        soft_clamp(out[static_cast<std::size_t>(2 * i + 1)])};
  return res;
}

std::vector<std::vector<double>> to_columns(std::span<const double> rows, std::int64_t n, int k) {
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(k),
                                        std::vector<double>(static_cast<std::size_t>(n)));
  for (std::int64_t i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = rows[static_cast<std::size_t>(i * k + j)];
  return cols;
}

std::vector<double> to_rows(const std::vector<std::vector<double>>& cols, std::int64_t n) {
  const int k = static_cast<int>(cols.size());
  std::vector<double> rows(static_cast<std::size_t>(n * k));
  for (std::int64_t i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) rows[static_cast<std::size_t>(i * k + j)] = cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
  return rows;
}

}  // namespace

std::vector<double> flow_forward(const FlowModel& m, std::span<const double> theta,
                                 std::span<const double> summary, std::int64_t n) {
  const int k = m.theta_dim;
  auto cols = to_columns(theta, n, k);
  if (!m.theta_lo.empty()) {
    for (int j = 0; j < k; ++j) {
      const double lo = m.theta_lo[static_cast<std::size_t>(j)];
      const double width = m.theta_hi[static_cast<std::size_t>(j)] - lo;
      for (auto& v : cols[static_cast<std::size_t>(j)]) {
        const double s = (v - lo) / width;
        v = std::log(s) - std::log1p(-s);
      }
    }
  }
  for (int layer = 0; layer < m.n_layers; ++layer) {
    const auto order = layer_order(layer, k);
    std::vector<std::vector<double>> y(static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) y[static_cast<std::size_t>(t)] = cols[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])];
    for (int t = 0; t < k; ++t) {
      const auto cond = conditioner_raw(m, layer, t, y, summary, n);
      auto& target = cols[static_cast<std::size_t>(t)];
      for (std::int64_t i = 0; i < n; ++i)
        target[static_cast<std::size_t>(i)] =
            (y[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] - cond[static_cast<std::size_t>(i)].shift) *
            std::exp(-cond[static_cast<std::size_t>(i)].log_scale);
    }
  }
  return to_rows(cols, n);
}

std::vector<double> flow_inverse(const FlowModel& m, std::span<const double> base,
                                 std::span<const double> summary, std::int64_t n) {
  const int k = m.theta_dim;
  auto cols = to_columns(base, n, k);
  for (int layer = m.n_layers - 1; layer >= 0; --layer) {
    const auto order = layer_order(layer, k);
    std::vector<std::vector<double>> y(static_cast<std::size_t>(k),
                                       std::vector<double>(static_cast<std::size_t>(n)));
    for (int t = 0; t < k; ++t) {
      const auto cond = conditioner_raw(m, layer, t, y, summary, n);
      for (std::int64_t i = 0; i < n; ++i)
        y[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] =
            cols[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] *
                std::exp(cond[static_cast<std::size_t>(i)].log_scale) +
            cond[static_cast<std::size_t>(i)].shift;
    }
    for (int t = 0; t < k; ++t) cols[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] = y[static_cast<std::size_t>(t)];
  }
  if (!m.theta_lo.empty()) {
    for (int j = 0; j < k; ++j) {
      const double lo = m.theta_lo[static_cast<std::size_t>(j)];
      const double width = m.theta_hi[static_cast<std::size_t>(j)] - lo;
      for (auto& v : cols[static_cast<std::size_t>(j)]) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        v = lo + width * s;
      }
    }
  }
  return to_rows(cols, n);
}

std::vector<double> flow_sample(const FlowModel& m, std::span<const double> summary,
                                std::int64_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("flow_sample: need at least one draw");
  if (summary.size() != static_cast<std::size_t>(m.summary_dim))
    throw std::invalid_argument("flow_sample: summary has wrong dimension");
  const int k = m.theta_dim;
  std::vector<double> base(static_cast<std::size_t>(n * k));
  auto rng = make_rng(seed, 25);
  for (auto& v : base) v = standard_normal(rng);
  std::vector<double> tiled(static_cast<std::size_t>(n * m.summary_dim));
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(summary.begin(), summary.end(), tiled.begin() + i * m.summary_dim);
  return flow_inverse(m, base, tiled, n);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'P', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
void write_vec(std::ofstream& out, std::span<const double> v) {
  const std::uint64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}
std::vector<double> read_vec(std::ifstream& in) {
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return v;
}

void write_mlp_arch(std::ofstream& out, const Mlp& mlp) {
  write_u32(out, static_cast<std::uint32_t>(mlp.layers.size()));
  for (const auto& layer : mlp.layers) {
    write_u32(out, static_cast<std::uint32_t>(layer.weight.shape()[0]));
    write_u32(out, static_cast<std::uint32_t>(layer.weight.shape()[1]));
  }
}

Mlp read_mlp_arch(std::ifstream& in) {
  Mlp mlp;
  const std::uint32_t n_layers = read_u32(in);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto rows = static_cast<std::int64_t>(read_u32(in));
    const auto cols = static_cast<std::int64_t>(read_u32(in));
    DenseLayer layer;
    layer.weight = ad::Tensor::zeros({rows, cols}, /*requires_grad=*/true);
    layer.bias = ad::Tensor::zeros({cols}, /*requires_grad=*/true);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

}  // namespace

void save_checkpoint(const FlowModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out.write(kCheckpointMagic, 4);
  write_u32(out, kCheckpointVersion);
  write_u32(out, static_cast<std::uint32_t>(m.task));
  write_u32(out, static_cast<std::uint32_t>(m.theta_dim));
  write_u32(out, static_cast<std::uint32_t>(m.summary_dim));
  write_u32(out, static_cast<std::uint32_t>(m.n_layers));
  write_vec(out, m.theta_lo);
  write_vec(out, m.theta_hi);
  write_vec(out, m.nse.input_shift);
  write_vec(out, m.nse.input_scale);
  write_mlp_arch(out, m.nse.net);
  for (const auto& block : m.conditioners)
    for (const auto& mlp : block) write_mlp_arch(out, mlp);
  for (const auto& p : m.parameters()) write_vec(out, p.data());
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

void save_nse(const NseParams& nse, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_nse: cannot open " + path.string());
  const char magic[4] = {'R', 'P', 'N', 'S'};
  out.write(magic, 4);
  write_u32(out, kCheckpointVersion);
  write_vec(out, nse.input_shift);
  write_vec(out, nse.input_scale);
  write_mlp_arch(out, nse.net);
  for (const auto& layer : nse.net.layers) {
    write_vec(out, layer.weight.data());
    write_vec(out, layer.bias.data());
  }
  if (!out) throw std::runtime_error("save_nse: write failed for " + path.string());
}

NseParams load_nse(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_nse: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RPNS", 4) != 0)
    throw std::runtime_error("load_nse: " + path.string() + " is not a statistic checkpoint");
  if (read_u32(in) != kCheckpointVersion)
    throw std::runtime_error("load_nse: unsupported version in " + path.string());
  NseParams nse;
  nse.input_shift = read_vec(in);
  nse.input_scale = read_vec(in);
  nse.net = read_mlp_arch(in);
  for (auto& layer : nse.net.layers) {
    const auto w = read_vec(in);
    std::copy(w.begin(), w.end(), layer.weight.mutable_data().begin());
    const auto b = read_vec(in);
    std::copy(b.begin(), b.end(), layer.bias.mutable_data().begin());
  }
  if (!in) throw std::runtime_error("load_nse: truncated file " + path.string());
  return nse;
}

FlowModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: " + path.string() + " is not a checkpoint");
  if (read_u32(in) != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version in " + path.string());
  FlowModel m;
  m.task = static_cast<Task>(read_u32(in));
  m.theta_dim = static_cast<int>(read_u32(in));
  m.summary_dim = static_cast<int>(read_u32(in));
  m.n_layers = static_cast<int>(read_u32(in));
  m.theta_lo = read_vec(in);
  m.theta_hi = read_vec(in);
  m.nse.input_shift = read_vec(in);
  m.nse.input_scale = read_vec(in);
  m.nse.net = read_mlp_arch(in);
  for (int layer = 0; layer < m.n_layers; ++layer) {
    std::vector<Mlp> block;
    for (int t = 0; t < m.theta_dim; ++t) block.push_back(read_mlp_arch(in));
    m.conditioners.push_back(std::move(block));
  }
  for (auto p : m.parameters()) {
    const auto v = read_vec(in);
    auto dst = p.mutable_data();
    if (v.size() != dst.size())
      throw std::runtime_error("load_checkpoint: parameter table does not match architecture");
    std::copy(v.begin(), v.end(), dst.begin());
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path.string());
  return m;
}

}  // namespace rope
