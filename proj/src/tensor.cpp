#include "pva/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace pva {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace

std::string shape_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  store_ = std::make_shared<Store>();
  store_->values.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor Tensor::uninitialized(std::vector<int64_t> shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.store_ = std::make_shared<Store>();
  t.store_->values.resize(static_cast<size_t>(shape_numel(t.shape_)));
  return t;
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> values)
    : shape_(std::move(shape)) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape_)) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_string(shape_));
  }
  store_ = std::make_shared<Store>();
  store_->values.assign(values.begin(), values.end());
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.store_->values.begin(), t.store_->values.end(), v);
  return t;
}

int64_t Tensor::numel() const { return store_ ? static_cast<int64_t>(store_->values.size()) : 0; }

double* Tensor::data() { return store_->values.data(); }
const double* Tensor::data() const { return store_->values.data(); }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return store_->values[0];
}

bool Tensor::has_grad() const { return store_ && !store_->grad.empty(); }

void Tensor::ensure_grad() {
  if (store_->grad.empty()) store_->grad.assign(store_->values.size(), 0.0);
}

double* Tensor::grad() { return store_->grad.empty() ? nullptr : store_->grad.data(); }
const double* Tensor::grad() const {
  return store_->grad.empty() ? nullptr : store_->grad.data();
}

void Tensor::zero_grad() {
  if (store_ && !store_->grad.empty())
    std::fill(store_->grad.begin(), store_->grad.end(), 0.0);
}

Tensor& Tensor::mark_constant() {
  store_->constant = true;
  return *this;
}

bool Tensor::is_constant() const { return store_ && store_->constant; }

double* Tensor::grad_accum() {
  if (store_->constant) return nullptr;
  ensure_grad();
  return store_->grad.data();
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw DimensionError("cannot view " + shape_string(shape_) + " as " +
                         shape_string(new_shape));
  }
  Tensor t;
  t.store_ = store_;
  t.shape_ = std::move(new_shape);
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.store_ = std::make_shared<Store>();
  t.store_->values.assign(store_->values.begin(), store_->values.end());
  return t;
}

bool Tensor::all_finite() const {
  for (double v : store_->values)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tape::backward(Tensor& loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward must start from a scalar, got " +
                         shape_string(loss.shape()));
  loss.ensure_grad();
  loss.grad()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
}

Parameter::Parameter(std::string n, Tensor t) : tensor(std::move(t)), name(std::move(n)) {
  momentum.assign(static_cast<size_t>(tensor.numel()), 0.0);
  tensor.ensure_grad();
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw DimensionError("linear: x shape " + shape_string(x.shape()) +
                         " incompatible with w shape " + shape_string(w.shape()));
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(1)) {
    throw DimensionError("linear: b shape " + shape_string(b.shape()) +
                         " incompatible with w shape " + shape_string(w.shape()));
  }
  const int64_t n = x.dim(0), ci = x.dim(1), co = w.dim(1);
  Tensor out = Tensor::uninitialized({n, co});
  const double* xp = x.data();
  const double* wp = w.data();
  const double* bp = b.data();
  double* op = out.data();
  for (int64_t i = 0; i < n; ++i) {
    double* orow = op + i * co;
    for (int64_t j = 0; j < co; ++j) orow[j] = bp[j];
    const double* xrow = xp + i * ci;
    for (int64_t k = 0; k < ci; ++k) {
      const double xv = xrow[k];
      const double* wrow = wp + k * co;
      for (int64_t j = 0; j < co; ++j) orow[j] += xv * wrow[j];
    }
  }
  if (x.is_constant() && w.is_constant() && b.is_constant()) return out.mark_constant();
  tape.record([x = x, w = w, b = b, out = out, n, ci, co]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gx = x.grad_accum();
    double* gw = w.grad_accum();
    double* gb = b.grad_accum();
    const double* xp = x.data();
    const double* wp = w.data();
    for (int64_t i = 0; i < n; ++i) {
      const double* grow = g + i * co;
      const double* xrow = xp + i * ci;
      if (gb)
        for (int64_t j = 0; j < co; ++j) gb[j] += grow[j];
      if (gx && gw) {
        double* gxrow = gx + i * ci;
        for (int64_t k = 0; k < ci; ++k) {
          const double* wrow = wp + k * co;
          double* gwrow = gw + k * co;
          const double xv = xrow[k];
          double acc = 0.0;
          for (int64_t j = 0; j < co; ++j) {
            acc += grow[j] * wrow[j];
            gwrow[j] += xv * grow[j];
          }
          gxrow[k] += acc;
        }
      } else if (gw) {
        for (int64_t k = 0; k < ci; ++k) {
          double* gwrow = gw + k * co;
          const double xv = xrow[k];
          for (int64_t j = 0; j < co; ++j) gwrow[j] += xv * grow[j];
        }
      } else if (gx) {
        double* gxrow = gx + i * ci;
        for (int64_t k = 0; k < ci; ++k) {
          const double* wrow = wp + k * co;
          double acc = 0.0;
          for (int64_t j = 0; j < co; ++j) acc += grow[j] * wrow[j];
          gxrow[k] += acc;
        }
      }
    }
  });
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::uninitialized(x.shape());
  const int64_t n = x.numel();
  const double* xp = x.data();
  double* op = out.data();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > 0.0 ? xp[i] : 0.0;
  if (x.is_constant()) return out.mark_constant();
  tape.record([x = x, out = out, n]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gx = x.grad_accum();
    if (!gx) return;
    const double* xp = x.data();
    for (int64_t i = 0; i < n; ++i)
      if (xp[i] > 0.0) gx[i] += g[i];
  });
  return out;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::uninitialized(x.shape());
  const int64_t n = x.numel();
  const double* xp = x.data();
  double* op = out.data();
  for (int64_t i = 0; i < n; ++i) op[i] = 1.0 / (1.0 + std::exp(-xp[i]));
  if (x.is_constant()) return out.mark_constant();
  tape.record([x = x, out = out, n]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gx = x.grad_accum();
    if (!gx) return;
    const double* y = out.data();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
  return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_channels: leading dimensions disagree, " +
                         shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor out = Tensor::uninitialized({n, ca + cb});
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(op + i * (ca + cb), ap + i * ca, sizeof(double) * static_cast<size_t>(ca));
    std::memcpy(op + i * (ca + cb) + ca, bp + i * cb, sizeof(double) * static_cast<size_t>(cb));
  }
  if (a.is_constant() && b.is_constant()) return out.mark_constant();
  tape.record([a = a, b = b, out = out, n, ca, cb]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* ga = a.grad_accum();
    double* gb = b.grad_accum();
    for (int64_t i = 0; i < n; ++i) {
      const double* grow = g + i * (ca + cb);
      if (ga)
        for (int64_t j = 0; j < ca; ++j) ga[i * ca + j] += grow[j];
      if (gb)
        for (int64_t j = 0; j < cb; ++j) gb[i * cb + j] += grow[ca + j];
    }
  });
  return out;
}

Tensor masked_max_pool(Tape& tape, const Tensor& x, const std::vector<uint8_t>& mask) {
  if (x.rank() != 3)
    throw DimensionError("masked_max_pool expects [n,m,c], got " + shape_string(x.shape()));
  const int64_t n = x.dim(0), m = x.dim(1), c = x.dim(2);
  if (static_cast<int64_t>(mask.size()) != n * m)
    throw DimensionError("masked_max_pool: mask size " + std::to_string(mask.size()) +
                         " does not match slots " + std::to_string(n * m));
  Tensor out = Tensor::uninitialized({n, c});
  auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(n * c), -1);
  const double* xp = x.data();
  double* op = out.data();
  for (int64_t i = 0; i < n; ++i) {
    double* orow = op + i * c;
    int32_t* arow = argmax->data() + i * c;
    for (int64_t k = 0; k < m; ++k) {
      if (!mask[static_cast<size_t>(i * m + k)]) continue;
      const double* slot = xp + (i * m + k) * c;
      for (int64_t j = 0; j < c; ++j) {
        if (arow[j] < 0 || slot[j] > orow[j]) {
          orow[j] = slot[j];
          arow[j] = static_cast<int32_t>(k);
        }
      }
    }
    for (int64_t j = 0; j < c; ++j)
      if (arow[j] < 0) orow[j] = 0.0;  // empty neighborhood convention
  }
  if (x.is_constant()) return out.mark_constant();
  tape.record([x = x, out = out, argmax, n, m, c]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gx = x.grad_accum();
    if (!gx) return;
    for (int64_t i = 0; i < n; ++i) {
      const int32_t* arow = argmax->data() + i * c;
      for (int64_t j = 0; j < c; ++j) {
        if (arow[j] >= 0) gx[(i * m + arow[j]) * c + j] += g[i * c + j];
      }
    }
  });
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  Tensor out = Tensor::uninitialized(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (a.is_constant() && b.is_constant()) return out.mark_constant();
  tape.record([a = a, b = b, out = out, n]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* ga = a.grad_accum();
    double* gb = b.grad_accum();
    for (int64_t i = 0; i < n; ++i) {
      if (ga) ga[i] += g[i];
      if (gb) gb[i] += g[i];
    }
  });
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double s) {
  Tensor out = Tensor::uninitialized(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * s;
  if (x.is_constant()) return out.mark_constant();
  tape.record([x = x, out = out, n, s]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gx = x.grad_accum();
    if (!gx) return;
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * s;
  });
  return out;
}

Tensor reduce_sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  Tensor out = Tensor::scalar(acc);
  if (x.is_constant()) return out.mark_constant();
  tape.record([x = x, out = out, n]() mutable {
    if (!out.grad()) return;
    const double g = out.grad()[0];
    double* gx = x.grad_accum();
    if (!gx) return;
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  });
  return out;
}

SoftmaxCeResult softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                      std::span<const int> targets,
                                      std::span<const double> weights) {
  if (logits.rank() != 2)
    throw DimensionError("softmax_cross_entropy expects [n,C], got " +
                         shape_string(logits.shape()));
  const int64_t n = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n ||
      static_cast<int64_t>(weights.size()) != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
  }
  SoftmaxCeResult res;
  res.per_sample.resize(static_cast<size_t>(n));
  double total = 0.0;
  const double* lp = logits.data();
  for (int64_t i = 0; i < n; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= C)
      throw IndexError("category " + std::to_string(t) + " out of range [0," +
                       std::to_string(C) + ")");
    const double* row = lp + i * C;
    double mx = row[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < C; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    const double ce = lse - row[t];
    res.per_sample[static_cast<size_t>(i)] = ce;
    total += weights[static_cast<size_t>(i)] * ce;
  }
  res.loss = Tensor::scalar(total);
  if (logits.is_constant()) {
    res.loss.mark_constant();
    return res;
  }
  Tensor loss = res.loss;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> wt(weights.begin(), weights.end());
  tape.record([logits = logits, loss = loss, tg = std::move(tg), wt = std::move(wt), n,
               C]() mutable {
    if (!loss.grad()) return;
    const double g = loss.grad()[0];
    double* gl = logits.grad_accum();
    if (!gl) return;
    const double* lp = logits.data();
    for (int64_t i = 0; i < n; ++i) {
      const double* row = lp + i * C;
      double mx = row[0];
      for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int64_t j = 0; j < C; ++j) sum += std::exp(row[j] - mx);
      const double w = g * wt[static_cast<size_t>(i)];
      for (int64_t j = 0; j < C; ++j) {
        const double p = std::exp(row[j] - mx) / sum;
        const double onehot = (j == tg[static_cast<size_t>(i)]) ? 1.0 : 0.0;
        gl[i * C + j] += w * (p - onehot);
      }
    }
  });
  return res;
}

Tensor binary_cross_entropy(Tape& tape, const Tensor& p,
                            std::span<const double> targets, double scaleFactor) {
  const int64_t n = p.numel();
  if (static_cast<int64_t>(targets.size()) != n)
    throw DimensionError("binary_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " probabilities");
  constexpr double eps = 1e-7;
  double total = 0.0;
  const double* pp = p.data();
  for (int64_t i = 0; i < n; ++i) {
    const double pc = std::clamp(pp[i], eps, 1.0 - eps);
    const double t = targets[static_cast<size_t>(i)];
    total += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
  }
  Tensor out = Tensor::scalar(total * scaleFactor);
  if (p.is_constant()) return out.mark_constant();
  std::vector<double> tg(targets.begin(), targets.end());
  tape.record([p = p, out = out, tg = std::move(tg), n, scaleFactor]() mutable {
    if (!out.grad()) return;
    const double g = out.grad()[0] * scaleFactor;
    double* gp = p.grad_accum();
    if (!gp) return;
    const double* pp = p.data();
    for (int64_t i = 0; i < n; ++i) {
      if (pp[i] < eps || pp[i] > 1.0 - eps) continue;  // clamp region: flat
      const double t = tg[static_cast<size_t>(i)];
      gp[i] += g * (-t / pp[i] + (1.0 - t) / (1.0 - pp[i]));
    }
  });
  return out;
}

double finite_difference_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                               const Tensor& x, double step) {
  Tensor xa = x.clone();
  Tape tape;
  Tensor y = f(tape, xa);
  if (y.numel() != 1)
    throw DimensionError("finite_difference_check: f must return a scalar");
  tape.backward(y);
  const double* analytic = xa.grad();

  const int64_t n = x.numel();
  double worst = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    Tensor xp = x.clone();
    Tensor xm = x.clone();
    xp.data()[i] += step;
    xm.data()[i] -= step;
    Tape tp, tm;
    const double fp = f(tp, xp).item();
    const double fm = f(tm, xm).item();
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic ? analytic[i] : 0.0;
    const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace pva
