#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pva/error.hpp"

namespace pva {

// Dense n-dimensional array of 64-bit reals with an optional gradient
// buffer. Row-major, last index fastest. Copies share storage (a Tensor is
// a cheap handle); reshaped() gives a view over the same buffers, so
// gradients flow through views transparently.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor full(std::vector<int64_t> shape, double v);
  // No value initialization; for op outputs that overwrite every element.
  static Tensor uninitialized(std::vector<int64_t> shape);

  bool defined() const { return static_cast<bool>(store_); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const;

  double* data();
  const double* data() const;
  double item() const;  // numel()==1 convenience

  bool has_grad() const;
  void ensure_grad();          // allocates a zero gradient buffer if absent
  double* grad();              // nullptr when absent
  const double* grad() const;
  void zero_grad();

  // Constants are inputs that never need gradients; backward steps skip
  // accumulating into them (and into anything derived purely from them).
  Tensor& mark_constant();
  bool is_constant() const;
  // ensure_grad + grad, or nullptr for constants.
  double* grad_accum();

  // View with a new shape over the same storage (same element count).
  Tensor reshaped(std::vector<int64_t> new_shape) const;
  // Deep copy of values; no gradient buffer.
  Tensor clone() const;

  bool all_finite() const;

 private:
  // Allocator that skips value-initialization on resize; assign and fill
  // still write values as usual.
  template <typename T>
  struct NoInitAlloc : std::allocator<T> {
    template <typename U>
    struct rebind {
      using other = NoInitAlloc<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
      if constexpr (sizeof...(Args) > 0) ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  };

  struct Store {
    std::vector<double, NoInitAlloc<double>> values;
    std::vector<double, NoInitAlloc<double>> grad;  // empty = absent
    bool constant = false;
  };
  std::shared_ptr<Store> store_;
  std::vector<int64_t> shape_;
};

std::string shape_string(const std::vector<int64_t>& shape);

// Records backward steps during the forward pass. backward(loss) seeds the
// loss gradient with 1, runs the steps in reverse and clears the tape;
// graphs are never reused across optimizer steps.
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  void backward(Tensor& loss);
  void clear() { steps_.clear(); }
  size_t size() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
};

// A named, trainable tensor plus the optimizer's momentum buffer.
struct Parameter {
  Tensor tensor;
  std::string name;
  std::vector<double> momentum;

  Parameter() = default;
  Parameter(std::string n, Tensor t);
};

// --- forward ops (each records its backward step on the tape) ---

// out[i,j] = sum_k x[i,k] * w[k,j] + b[j]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(Tape& tape, const Tensor& x);

Tensor sigmoid(Tape& tape, const Tensor& x);

// Rows are a's channels followed by b's. Leading dimensions must agree.
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);

// x is [n, m, c], mask has n*m entries. out[i,j] = max over valid slots k of
// x[i,k,j]; rows with no valid slot yield 0. Backward routes each output
// gradient to the argmax slot only, lowest index on ties.
Tensor masked_max_pool(Tape& tape, const Tensor& x, const std::vector<uint8_t>& mask);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);

Tensor scale(Tape& tape, const Tensor& x, double s);

Tensor reduce_sum(Tape& tape, const Tensor& x);

struct SoftmaxCeResult {
  Tensor loss;                     // scalar: sum_i weights[i] * ce_i
  std::vector<double> per_sample;  // unweighted per-sample losses
};

// Log-sum-exp stabilized cross-entropy over logits [n, C]; targets in
// [0, C). weights are the caller's averaging weights (e.g. 1/n each).
SoftmaxCeResult softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                      std::span<const int> targets,
                                      std::span<const double> weights);

// -[t ln p + (1-t) ln(1-p)] summed and scaled by the caller-supplied factor
// (e.g. 1/count). p is clamped to [1e-7, 1 - 1e-7].
Tensor binary_cross_entropy(Tape& tape, const Tensor& p,
                            std::span<const double> targets, double scaleFactor);

// Central-difference gradient verification. f must be deterministic and
// return a scalar tensor. Returns max over coordinates of
// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
double finite_difference_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                               const Tensor& x, double step);

}  // namespace pva
