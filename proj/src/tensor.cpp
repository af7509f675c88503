#include "rope/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rope::ad {

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) {
    if (e < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

void Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_visit_epoch = 0;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  if (shape_size(n->shape) != static_cast<std::int64_t>(value.size()))
    throw std::invalid_argument("tensor data length does not match shape " + shape_str(n->shape));
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

// Leading-dim broadcast classification for binary elementwise ops.
enum class Bcast { none, left, right };  // which side is the small operand

struct BinPlan {
  Bcast mode;
  std::int64_t reps;    // leading repetitions of the small operand
  std::int64_t block;   // elements of the small operand
};

BinPlan plan_binary(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return {Bcast::none, 1, shape_size(a)};
  const auto suffix_of = [](const Shape& small, const Shape& big) {
    if (small.size() >= big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (suffix_of(b, a) || b.empty()) {
    const std::int64_t blk = shape_size(b);
    if (blk == 0) shape_error(op, a, b);
    return {Bcast::right, shape_size(a) / blk, blk};
  }
  if (suffix_of(a, b) || a.empty()) {
    const std::int64_t blk = shape_size(a);
    if (blk == 0) shape_error(op, a, b);
    return {Bcast::left, shape_size(b) / blk, blk};
  }
  shape_error(op, a, b);
}

}  // namespace

Tensor make_op_result(Shape shape, std::vector<double> value, const char* op,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backward) {
  bool needs_grad = false;
  if (g_grad_enabled && g_active_tape != nullptr)
    for (const auto& p : parents)
      if (p->requires_grad) needs_grad = true;
  auto n = make_node(std::move(shape), std::move(value), needs_grad);
  n->op = op;
  if (needs_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
    g_active_tape->record(n);
  }
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v),
                          requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v) { return from_data({}, {v}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(node_->value.size()); }

std::int64_t Tensor::rows() const {
  if (node_->shape.size() != 2) throw std::invalid_argument("rows(): tensor is not 2-d");
  return node_->shape[0];
}

std::int64_t Tensor::cols() const {
  if (node_->shape.size() != 2) throw std::invalid_argument("cols(): tensor is not 2-d");
  return node_->shape[1];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(size()) +
                                               " elements");
  return node_->value[0];
}

void Tensor::check_finite(const char* what) const {
  for (double v : node_->value)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value in ") + what);
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

void Tape::clear() { nodes_.clear(); }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  Node* loss_node = loss.node().get();
  std::size_t loss_pos = nodes_.size();
  for (std::size_t i = nodes_.size(); i-- > 0;)
    if (nodes_[i].get() == loss_node) {
      loss_pos = i;
      break;
    }
  if (loss_pos == nodes_.size())
    throw std::invalid_argument("backward: loss was not recorded on this tape");

  const std::uint64_t epoch = ++g_visit_epoch;
  loss_node->ensure_grad();
  loss_node->grad[0] = 1.0;
  loss_node->visit_epoch = epoch;
  // Creation order is a topological order, so one reverse sweep suffices.
  for (std::size_t i = loss_pos + 1; i-- > 0;) {
    Node* n = nodes_[i].get();
    if (n->visit_epoch != epoch) continue;
    for (const auto& p : n->parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      p->visit_epoch = epoch;
    }
    if (n->backward) n->backward(*n);
  }
}

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr)
    throw std::runtime_error("backward: no active tape on this thread");
  g_active_tape->backward(loss);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

namespace {

// Shared core for add/sub/mul.
template <class Fwd, class BwdA, class BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, BwdA dfda,
                 BwdB dfdb) {
  const BinPlan plan = plan_binary(name, a.shape(), b.shape());
  const Shape& out_shape = plan.mode == Bcast::left ? b.shape() : a.shape();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(static_cast<std::size_t>(shape_size(out_shape)));
  for (std::int64_t r = 0; r < plan.reps; ++r)
    for (std::int64_t i = 0; i < plan.block; ++i) {
      const std::size_t big = static_cast<std::size_t>(r * plan.block + i);
      const std::size_t small = static_cast<std::size_t>(i);
      const double x = plan.mode == Bcast::left ? av[small] : av[big];
      const double y = plan.mode == Bcast::right ? bv[small] : bv[big];
      out[big] = fwd(x, y);
    }
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(
      out_shape, std::move(out), name, {an, bn},
      [an, bn, plan, dfda, dfdb](Node& self) {
        for (std::int64_t r = 0; r < plan.reps; ++r)
          for (std::int64_t i = 0; i < plan.block; ++i) {
            const std::size_t big = static_cast<std::size_t>(r * plan.block + i);
            const std::size_t small = static_cast<std::size_t>(i);
            const std::size_t ai = plan.mode == Bcast::left ? small : big;
            const std::size_t bi = plan.mode == Bcast::right ? small : big;
            const double g = self.grad[big];
            const double x = an->value[ai];
            const double y = bn->value[bi];
            if (an->requires_grad) an->grad[ai] += g * dfda(x, y);
            if (bn->requires_grad) bn->grad[bi] += g * dfdb(x, y);
          }
      });
}

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd dfdx, bool check_domain = false) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = fwd(av[i]);
    if (check_domain && !std::isfinite(out[i]))
      throw std::domain_error(std::string(name) + ": domain violation at input " +
                              std::to_string(av[i]));
  }
  auto an = a.node();
  return make_op_result(a.shape(), std::move(out), name, {an}, [an, dfdx](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < self.value.size(); ++i)
      an->grad[i] += self.grad[i] * dfdx(an->value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    shape_error("matmul", a.shape(), b.shape());
  const std::int64_t n = a.shape()[0], m = a.shape()[1], p = b.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(n * p));
  {
    ConstMatMap am(a.data().data(), n, m);
    ConstMatMap bm(b.data().data(), m, p);
    MatMap om(out.data(), n, p);
    om.noalias() = am * bm;
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(
      {n, p}, std::move(out), "matmul", {an, bn}, [an, bn, n, m, p](Node& self) {
        ConstMatMap g(self.grad.data(), n, p);
        if (an->requires_grad) {
          ConstMatMap bm(bn->value.data(), m, p);
          MatMap ag(an->grad.data(), n, m);
          ag.noalias() += g * bm.transpose();
        }
        if (bn->requires_grad) {
          ConstMatMap am(an->value.data(), n, m);
          MatMap bg(bn->grad.data(), m, p);
          bg.noalias() += am.transpose() * g;
        }
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh_op(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp_op(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; }, /*check_domain=*/true);
}

Tensor log_op(const Tensor& a) {
  for (double v : a.data())
    if (!(v > 0.0))
      throw std::domain_error("log: domain violation at input " + std::to_string(v));
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor abs_op(const Tensor& a) {
  // abs'(0) := 0.
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto an = a.node();
  return make_op_result({}, {total}, "sum", {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    const double g = self.grad[0];
    for (auto& gv : an->grad) gv += g;
  });
}

Tensor sum_cols(const Tensor& a) {
  const std::int64_t n = a.rows(), m = a.cols();
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  const auto av = a.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) out[static_cast<std::size_t>(i)] += av[static_cast<std::size_t>(i * m + j)];
  auto an = a.node();
  return make_op_result({n, 1}, std::move(out), "sum_cols", {an}, [an, n, m](Node& self) {
    if (!an->requires_grad) return;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j)
        an->grad[static_cast<std::size_t>(i * m + j)] += self.grad[static_cast<std::size_t>(i)];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double inv_n = 1.0 / static_cast<double>(a.size());
  auto an = a.node();
  return make_op_result({}, {total * inv_n}, "mean", {an}, [an, inv_n](Node& self) {
    if (!an->requires_grad) return;
    const double g = self.grad[0] * inv_n;
    for (auto& gv : an->grad) gv += g;
  });
}

Tensor broadcast_rows(const Tensor& a, std::int64_t n) {
  if (a.shape().size() > 1) throw std::invalid_argument("broadcast_rows: operand must be scalar or 1-d");
  if (n < 0) throw std::invalid_argument("broadcast_rows: negative row count");
  const std::int64_t m = a.size();
  std::vector<double> out(static_cast<std::size_t>(n * m));
  const auto av = a.data();
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(av.begin(), av.end(), out.begin() + static_cast<std::ptrdiff_t>(i * m));
  auto an = a.node();
  return make_op_result({n, m}, std::move(out), "broadcast", {an}, [an, n, m](Node& self) {
    if (!an->requires_grad) return;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j)
        an->grad[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i * m + j)];
  });
}

Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t end) {
  const std::int64_t n = a.rows(), m = a.cols();
  if (begin < 0 || end > m || begin > end)
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") outside " + shape_str(a.shape()));
  const std::int64_t w = end - begin;
  std::vector<double> out(static_cast<std::size_t>(n * w));
  const auto av = a.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      out[static_cast<std::size_t>(i * w + j)] = av[static_cast<std::size_t>(i * m + begin + j)];
  auto an = a.node();
  return make_op_result({n, w}, std::move(out), "slice", {an}, [an, n, m, w, begin](Node& self) {
    if (!an->requires_grad) return;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < w; ++j)
        an->grad[static_cast<std::size_t>(i * m + begin + j)] +=
            self.grad[static_cast<std::size_t>(i * w + j)];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  const std::int64_t n = parts[0].rows();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) shape_error("concat", parts[0].shape(), p.shape());
    total += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(n * total));
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t w = p.cols();
    const auto pv = p.data();
    for (std::int64_t i = 0; i < n; ++i)
      std::copy(pv.begin() + static_cast<std::ptrdiff_t>(i * w),
                pv.begin() + static_cast<std::ptrdiff_t>((i + 1) * w),
                out.begin() + static_cast<std::ptrdiff_t>(i * total + off));
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += w;
  }
  return make_op_result({n, total}, std::move(out), "concat", nodes,
                        [nodes, offsets, n, total](Node& self) {
                          for (std::size_t k = 0; k < nodes.size(); ++k) {
                            const auto& pn = nodes[k];
                            if (!pn->requires_grad) continue;
                            const std::int64_t w = pn->shape[1];
                            for (std::int64_t i = 0; i < n; ++i)
                              for (std::int64_t j = 0; j < w; ++j)
                                pn->grad[static_cast<std::size_t>(i * w + j)] +=
                                    self.grad[static_cast<std::size_t>(i * total + offsets[k] + j)];
                          }
                        });
}

namespace {

// max-shifted logsumexp over a contiguous range; returns (lse, max).
double stable_lse(std::span<const double> v, std::int64_t begin, std::int64_t end) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = begin; i < end; ++i) mx = std::max(mx, v[static_cast<std::size_t>(i)]);
  if (!std::isfinite(mx)) return mx;  // all -inf
  double acc = 0.0;
  for (std::int64_t i = begin; i < end; ++i) acc += std::exp(v[static_cast<std::size_t>(i)] - mx);
  return mx + std::log(acc);
}

}  // namespace

Tensor logsumexp(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("logsumexp: empty tensor");
  const double lse = stable_lse(a.data(), 0, a.size());
  auto an = a.node();
  return make_op_result({}, {lse}, "logsumexp", {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    const double g = self.grad[0];
    const double lse_val = self.value[0];
    for (std::size_t i = 0; i < an->value.size(); ++i)
      an->grad[i] += g * std::exp(an->value[i] - lse_val);
  });
}

Tensor logsumexp_cols(const Tensor& a) {
  const std::int64_t n = a.rows(), m = a.cols();
  if (m == 0) throw std::invalid_argument("logsumexp: empty rows");
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = stable_lse(a.data(), i * m, (i + 1) * m);
  auto an = a.node();
  return make_op_result({n, 1}, std::move(out), "logsumexp", {an}, [an, n, m](Node& self) {
    if (!an->requires_grad) return;
    for (std::int64_t i = 0; i < n; ++i) {
      const double g = self.grad[static_cast<std::size_t>(i)];
      const double lse_val = self.value[static_cast<std::size_t>(i)];
      for (std::int64_t j = 0; j < m; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i * m + j);
        an->grad[idx] += g * std::exp(an->value[idx] - lse_val);
      }
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      "mul", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_const(const Tensor& a, double c) {
  return unary_op(
      "add", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

}  // namespace rope::ad
