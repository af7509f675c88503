#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rope::ad {

// Minimal dense double-precision tensors with define-by-run reverse-mode
// differentiation. Tensors are shared handles to nodes; ops record onto the
// thread's active Tape when gradients are wanted, and backward() replays the
// tape once in reverse. Broadcasting is restricted to a leading batch
// dimension (scalar -> any shape, [m] -> [n, m]); anything else needs an
// explicit reshape.

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // pushes node.grad into parents
  const char* op = "leaf";
  std::uint64_t visit_epoch = 0;

  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t size() const;
  std::int64_t rows() const;  // 2-d helpers
  std::int64_t cols() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  std::span<const double> grad() const;  // empty if never populated
  void zero_grad();

  double item() const;  // single-element tensors
  double at(std::int64_t i) const { return data()[static_cast<std::size_t>(i)]; }

  std::shared_ptr<Node>& node() { return node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Throws if any entry is NaN/Inf; `what` names the tensor in the message.
  void check_finite(const char* what) const;

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
  friend Tensor make_op_result(Shape, std::vector<double>, const char*,
                               std::vector<std::shared_ptr<Node>>,
                               std::function<void(Node&)>);
};

// Records nodes in creation order while alive (constructor installs the tape
// as the thread's active one, destructor restores the previous). Gradients
// can only flow through ops executed under some tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void clear();
  std::size_t size() const { return nodes_.size(); }

  static Tape* active();
  void record(std::shared_ptr<Node> n) { nodes_.push_back(std::move(n)); }

  // Populates grad on every requires_grad leaf reachable from `loss`.
  void backward(const Tensor& loss);

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
  Tape* prev_ = nullptr;
};

// Scoped switch that stops ops from recording (evaluation fast path).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

bool grad_enabled();

// Elementwise / linear-algebra ops. Binary ops accept equal shapes or a
// leading-dim broadcast of either operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs_op(const Tensor& a);

Tensor sum(const Tensor& a);                    // all elements -> scalar
Tensor sum_cols(const Tensor& a);               // [n, m] -> [n, 1]
Tensor mean(const Tensor& a);                   // all elements -> scalar
Tensor broadcast_rows(const Tensor& a, std::int64_t n);  // [m] or scalar -> [n, m]
Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t end);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor logsumexp(const Tensor& a);              // all elements -> scalar
Tensor logsumexp_cols(const Tensor& a);         // [n, m] -> [n, 1]

Tensor scale(const Tensor& a, double c);        // mul by constant scalar
Tensor add_const(const Tensor& a, double c);
Tensor neg(const Tensor& a);

void backward(const Tensor& loss);  // delegates to the active tape

}  // namespace rope::ad
