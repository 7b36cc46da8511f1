#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace msod {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

namespace detail {

// Value storage shared by Tensor handles. Data is write-once (filled at
// construction); only grad may change afterwards.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;

  int size() const { return static_cast<int>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Dense n-dimensional array of doubles, row-major, value semantics.
// Copies are shallow; the underlying values never change after construction.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int size() const;
  int extent(int axis) const;
  const std::vector<double>& data() const;
  double value() const;  // requires size() == 1
  double at(std::initializer_list<int> index) const;

  bool requires_grad() const;
  // Gradient buffer; zeros if backward has not touched this tensor yet.
  std::vector<double> grad() const;
  void zero_grad() const;

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// Reverse-mode tape. While a Tape is alive it records every operation whose
// output requires grad (per thread, innermost tape wins). backward() replays
// the recorded rules in reverse order. Single-owner: not copyable.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t num_entries() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad tensor reachable from the loss. Grad buffers of all nodes
  // touched by this tape are reset first, so each call yields exact
  // derivatives. Rejects non-scalar losses.
  void backward(const Tensor& loss);

  static Tape* active();

  void push(std::vector<detail::NodePtr> nodes, std::function<void()> fn);

 private:
  struct Entry {
    std::vector<detail::NodePtr> nodes;  // inputs then output
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

enum class Padding { kSame, kValid };

// ---- differentiable operations ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, int axis);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              int stride = 1, Padding padding = Padding::kSame);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor upsample_bilinear(const Tensor& x, int target_h, int target_w);
Tensor global_avg_pool(const Tensor& x);
Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor concat(const std::vector<Tensor>& xs);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor transpose2d(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor maxpool2d(const Tensor& x, int window = 2);
Tensor reduce_sum(const Tensor& x);
// out[c,h,w] = x[c,h,w] * g[c]
Tensor scale_channels(const Tensor& x, const Tensor& g);

}  // namespace msod
