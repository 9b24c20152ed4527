#include "rba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rba/numeric_util.hpp"

namespace rba {

namespace {

thread_local std::vector<Tape*> g_tape_stack;

bool taping(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

// Decomposes a shape around `axis` into outer * n * inner extents, so that
// the flat index of (o, i, r) is (o * n + i) * inner + r.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_to_string(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  s.n = static_cast<std::size_t>(shape[axis]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) {
    s.inner *= static_cast<std::size_t>(shape[i]);
  }
  return s;
}

using DataPtr = std::shared_ptr<detail::TensorData>;

void mark_and_record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                     std::function<void()> step) {
  if (!taping(inputs)) return;
  out.set_requires_grad(true);
  Tape::active()->record(std::move(step));
}

}  // namespace

// --- shape helpers ------------------------------------------------------

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) {
      throw ShapeError("invalid shape " + shape_to_string(shape) +
                       ": extents must be positive");
    }
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

// --- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) {
  const std::size_t n = shape_numel(shape);
  data_ = std::make_shared<detail::TensorData>();
  data_->shape = std::move(shape);
  data_->value.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  const std::size_t n = shape_numel(shape);
  if (n != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_to_string(shape));
  }
  data_ = std::make_shared<detail::TensorData>();
  data_->shape = std::move(shape);
  data_->value = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from_data(std::shared_ptr<detail::TensorData> data) {
  Tensor t;
  t.data_ = std::move(data);
  return t;
}

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("extent: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_to_string(shape()));
  }
  return data_->shape[axis];
}

double Tensor::value() const {
  if (numel() != 1) {
    throw ShapeError("value(): tensor of shape " + shape_to_string(shape()) +
                     " is not a scalar");
  }
  return data_->value[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("at(): index rank mismatch for shape " +
                     shape_to_string(shape()));
  }
  std::size_t off = 0;
  int axis = 0;
  for (int i : index) {
    if (i < 0 || i >= data_->shape[axis]) {
      throw ShapeError("at(): index out of bounds for shape " +
                       shape_to_string(shape()));
    }
    off = off * static_cast<std::size_t>(data_->shape[axis]) +
          static_cast<std::size_t>(i);
    ++axis;
  }
  return data_->value[off];
}

Tensor& Tensor::set_requires_grad(bool on) {
  data_->requires_grad = on;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) {
    throw TapeError("grad(): no gradient recorded for this tensor");
  }
  return data_->grad;
}

void Tensor::zero_grad() {
  if (data_ && !data_->grad.empty()) {
    std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
  }
}

// --- Tape ---------------------------------------------------------------

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) {
    g_tape_stack.pop_back();
  }
}

Tape* Tape::active() {
  return g_tape_stack.empty() ? nullptr : g_tape_stack.back();
}

void Tape::backward(const Tensor& loss) {
  if (replayed_) {
    throw TapeError("backward: tape already replayed; re-record the forward pass");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw TapeError("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw TapeError("backward: loss is not connected to any tracked input");
  }
  replayed_ = true;
  auto data = loss.data();
  data->ensure_grad();
  data->grad[0] = 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// --- construction ---------------------------------------------------------

Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

Tensor randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// --- elementwise binary -----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  DataPtr ad = a.data(), bd = b.data(), od = out.data();
  mark_and_record(out, {&a, &b}, [ad, bd, od] {
    if (od->grad.empty()) return;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  DataPtr ad = a.data(), bd = b.data(), od = out.data();
  mark_and_record(out, {&a, &b}, [ad, bd, od] {
    if (od->grad.empty()) return;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] -= od->grad[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  DataPtr ad = a.data(), bd = b.data(), od = out.data();
  mark_and_record(out, {&a, &b}, [ad, bd, od] {
    if (od->grad.empty()) return;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        ad->grad[i] += od->grad[i] * bd->value[i];
      }
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        bd->grad[i] += od->grad[i] * ad->value[i];
      }
    }
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_defined(a, "div");
  require_defined(b, "div");
  require_same_shape(a, b, "div");
  for (double v : b.values()) {
    if (v == 0.0) throw NumericError("div: zero denominator (guard with an epsilon)");
  }
  Tensor out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  DataPtr ad = a.data(), bd = b.data(), od = out.data();
  mark_and_record(out, {&a, &b}, [ad, bd, od] {
    if (od->grad.empty()) return;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        ad->grad[i] += od->grad[i] / bd->value[i];
      }
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        bd->grad[i] -= od->grad[i] * ad->value[i] / (bd->value[i] * bd->value[i]);
      }
    }
  });
  return out;
}

Tensor add_scalar(const Tensor& x, double c) {
  require_defined(x, "add_scalar");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
  });
  return out;
}

Tensor scale(const Tensor& x, double c) {
  require_defined(x, "scale");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, c] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      xd->grad[i] += od->grad[i] * c;
    }
  });
  return out;
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// --- elementwise unary ------------------------------------------------------

Tensor exp(const Tensor& x) {
  require_defined(x, "exp");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = std::exp(xv[i]);
    if (!std::isfinite(ov[i])) {
      throw NumericError("exp: overflow at input " + std::to_string(xv[i]));
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      xd->grad[i] += od->grad[i] * od->value[i];
    }
  });
  return out;
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  for (double v : x.values()) {
    if (!(v > 0.0)) {
      throw NumericError("log: domain violation at input " + std::to_string(v) +
                         " (guard with an epsilon)");
    }
  }
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(xv[i]);
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      xd->grad[i] += od->grad[i] / xd->value[i];
    }
  });
  return out;
}

Tensor sqrt(const Tensor& x) {
  require_defined(x, "sqrt");
  for (double v : x.values()) {
    if (v < 0.0) {
      throw NumericError("sqrt: negative input " + std::to_string(v));
    }
  }
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(xv[i]);
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      if (od->grad[i] == 0.0) continue;
      if (od->value[i] == 0.0) {
        throw NumericError("sqrt: gradient at zero (guard the input with an epsilon)");
      }
      xd->grad[i] += od->grad[i] / (2.0 * od->value[i]);
    }
  });
  return out;
}

Tensor square(const Tensor& x) {
  require_defined(x, "square");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * xv[i];
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      xd->grad[i] += od->grad[i] * 2.0 * xd->value[i];
    }
  });
  return out;
}

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      xd->grad[i] += od->grad[i] * (1.0 - od->value[i] * od->value[i]);
    }
  });
  return out;
}

namespace {
double stable_logistic(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor logistic(const Tensor& x) {
  require_defined(x, "logistic");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = stable_logistic(xv[i]);
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      const double s = od->value[i];
      xd->grad[i] += od->grad[i] * s * (1.0 - s);
    }
  });
  return out;
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      if (xd->value[i] > 0.0) xd->grad[i] += od->grad[i];
    }
  });
  return out;
}

Tensor softplus(const Tensor& x) {
  require_defined(x, "softplus");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double v = xv[i];
    ov[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v)));
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      xd->grad[i] += od->grad[i] * stable_logistic(xd->value[i]);
    }
  });
  return out;
}

Tensor clamp_min(const Tensor& x, double floor) {
  require_defined(x, "clamp_min");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::max(xv[i], floor);
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, floor] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      if (xd->value[i] > floor) xd->grad[i] += od->grad[i];
    }
  });
  return out;
}

// --- structure --------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) +
                     " as " + shape_to_string(shape));
  }
  Tensor out(std::move(shape), x.values());
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
  });
  return out;
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() < 2) {
    throw ShapeError("transpose: needs rank >= 2, got " +
                     shape_to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  const int r = x.rank();
  std::swap(out_shape[r - 2], out_shape[r - 1]);
  const std::size_t rows = static_cast<std::size_t>(x.shape()[r - 2]);
  const std::size_t cols = static_cast<std::size_t>(x.shape()[r - 1]);
  const std::size_t batch = x.numel() / (rows * cols);
  Tensor out(out_shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        ov[base + j * rows + i] = xv[base + i * cols + j];
      }
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, batch, rows, cols] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = b * rows * cols;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          xd->grad[base + i * cols + j] += od->grad[base + j * rows + i];
        }
      }
    }
  });
  return out;
}

Tensor expand_axis(const Tensor& x, int axis, int times) {
  require_defined(x, "expand_axis");
  if (axis < 0 || axis > x.rank()) {
    throw ShapeError("expand_axis: insertion point " + std::to_string(axis) +
                     " out of range for shape " + shape_to_string(x.shape()));
  }
  if (times <= 0) throw ShapeError("expand_axis: times must be positive");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin() + axis, times);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.shape()[i]);
  for (int i = axis; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.shape()[i]);
  Tensor out(out_shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  const std::size_t t = static_cast<std::size_t>(times);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < t; ++k) {
      std::copy(xv.begin() + o * inner, xv.begin() + (o + 1) * inner,
                ov.begin() + (o * t + k) * inner);
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, outer, inner, t] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < t; ++k) {
        const std::size_t src = (o * t + k) * inner;
        for (std::size_t r = 0; r < inner; ++r) {
          xd->grad[o * inner + r] += od->grad[src + r];
        }
      }
    }
  });
  return out;
}

Tensor expand_leading(Tensor x, const Shape& leading) {
  for (int i = static_cast<int>(leading.size()) - 1; i >= 0; --i) {
    x = expand_axis(x, 0, leading[i]);
  }
  return x;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) {
    throw ShapeError("concat: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_to_string(parts[0].shape()));
  }
  Shape out_shape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    if (parts[p].rank() != r) {
      throw ShapeError("concat: rank mismatch " + shape_to_string(parts[0].shape()) +
                       " vs " + shape_to_string(parts[p].shape()));
    }
    for (int i = 0; i < r; ++i) {
      if (i == axis) continue;
      if (parts[p].shape()[i] != out_shape[i]) {
        throw ShapeError("concat: shape mismatch off axis: " +
                         shape_to_string(parts[0].shape()) + " vs " +
                         shape_to_string(parts[p].shape()));
      }
    }
    out_shape[axis] += parts[p].shape()[axis];
  }
  const AxisSplit os = split_axis(out_shape, axis, "concat");
  Tensor out(out_shape);
  auto& ov = out.values();
  std::size_t col_off = 0;
  struct PartInfo {
    DataPtr data;
    bool track;
    std::size_t n;
    std::size_t col_off;
  };
  std::vector<PartInfo> infos;
  infos.reserve(parts.size());
  const bool rec = [&] {
    if (!Tape::active()) return false;
    for (const Tensor& p : parts) {
      if (p.requires_grad()) return true;
    }
    return false;
  }();
  for (const Tensor& p : parts) {
    const std::size_t pn = static_cast<std::size_t>(p.shape()[axis]);
    const auto& pv = p.values();
    for (std::size_t o = 0; o < os.outer; ++o) {
      for (std::size_t i = 0; i < pn; ++i) {
        std::copy(pv.begin() + (o * pn + i) * os.inner,
                  pv.begin() + (o * pn + i + 1) * os.inner,
                  ov.begin() + (o * os.n + col_off + i) * os.inner);
      }
    }
    infos.push_back({p.data(), p.requires_grad(), pn, col_off});
    col_off += pn;
  }
  if (rec) {
    Tensor& mutable_out = out;
    mutable_out.set_requires_grad(true);
    DataPtr od = out.data();
    const AxisSplit cs = os;
    Tape::active()->record([od, infos, cs] {
      if (od->grad.empty()) return;
      for (const PartInfo& info : infos) {
        if (!info.track) continue;
        info.data->ensure_grad();
        for (std::size_t o = 0; o < cs.outer; ++o) {
          for (std::size_t i = 0; i < info.n; ++i) {
            const std::size_t src = (o * cs.n + info.col_off + i) * cs.inner;
            const std::size_t dst = (o * info.n + i) * cs.inner;
            for (std::size_t r = 0; r < cs.inner; ++r) {
              info.data->grad[dst + r] += od->grad[src + r];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  require_defined(x, "slice");
  const AxisSplit s = split_axis(x.shape(), axis, "slice");
  if (start < 0 || length <= 0 ||
      static_cast<std::size_t>(start + length) > s.n) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") out of bounds for shape " +
                     shape_to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  const std::size_t len = static_cast<std::size_t>(length);
  const std::size_t st = static_cast<std::size_t>(start);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < len; ++i) {
      std::copy(xv.begin() + (o * s.n + st + i) * s.inner,
                xv.begin() + (o * s.n + st + i + 1) * s.inner,
                ov.begin() + (o * len + i) * s.inner);
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, s, st, len] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t src = (o * len + i) * s.inner;
        const std::size_t dst = (o * s.n + st + i) * s.inner;
        for (std::size_t r = 0; r < s.inner; ++r) {
          xd->grad[dst + r] += od->grad[src + r];
        }
      }
    }
  });
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<std::vector<int>>& ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) {
    throw ShapeError("embedding: table must be rank 2, got " +
                     shape_to_string(table.shape()));
  }
  if (ids.empty()) throw ShapeError("embedding: empty id batch");
  const int vocab = table.shape()[0];
  const int width = table.shape()[1];
  const std::size_t cols = static_cast<std::size_t>(ids[0].size());
  if (cols == 0) throw ShapeError("embedding: empty id rows");
  for (const auto& row : ids) {
    if (row.size() != cols) {
      throw ShapeError("embedding: ragged id rows (pad to a common length)");
    }
    for (int id : row) {
      if (id < 0 || id >= vocab) {
        throw DataError("embedding: token id " + std::to_string(id) +
                        " out of range [0, " + std::to_string(vocab) + ")");
      }
    }
  }
  Tensor out(Shape{static_cast<int>(ids.size()), static_cast<int>(cols), width});
  const auto& tv = table.values();
  auto& ov = out.values();
  const std::size_t w = static_cast<std::size_t>(width);
  std::size_t pos = 0;
  for (const auto& row : ids) {
    for (int id : row) {
      std::copy(tv.begin() + static_cast<std::size_t>(id) * w,
                tv.begin() + (static_cast<std::size_t>(id) + 1) * w,
                ov.begin() + pos * w);
      ++pos;
    }
  }
  DataPtr td = table.data(), od = out.data();
  auto flat_ids = std::make_shared<std::vector<int>>();
  flat_ids->reserve(ids.size() * cols);
  for (const auto& row : ids) flat_ids->insert(flat_ids->end(), row.begin(), row.end());
  mark_and_record(out, {&table}, [td, od, flat_ids, w] {
    if (od->grad.empty() || !td->requires_grad) return;
    td->ensure_grad();
    for (std::size_t p = 0; p < flat_ids->size(); ++p) {
      const std::size_t base = static_cast<std::size_t>((*flat_ids)[p]) * w;
      for (std::size_t r = 0; r < w; ++r) {
        td->grad[base + r] += od->grad[p * w + r];
      }
    }
  });
  return out;
}

// --- matmul ------------------------------------------------------------------

namespace {

// Maps each output batch index to the flat batch offset of an input whose
// leading extents broadcast against the output batch shape.
std::vector<std::size_t> batch_offsets(const Shape& out_batch,
                                       const Shape& in_batch,
                                       std::size_t matrix_elems) {
  std::size_t total = 1;
  for (int e : out_batch) total *= static_cast<std::size_t>(e);
  std::vector<std::size_t> offsets(total);
  const int ob = static_cast<int>(out_batch.size());
  const int ib = static_cast<int>(in_batch.size());
  std::vector<std::size_t> in_strides(ib, 0);
  std::size_t stride = matrix_elems;
  for (int i = ib - 1; i >= 0; --i) {
    in_strides[i] = (in_batch[i] == 1) ? 0 : stride;
    stride *= static_cast<std::size_t>(in_batch[i]);
  }
  std::vector<int> idx(ob, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t off = 0;
    for (int i = 0; i < ib; ++i) {
      // align right: out axis (ob - ib + i) pairs with in axis i
      off += in_strides[i] * static_cast<std::size_t>(idx[ob - ib + i]);
    }
    offsets[flat] = off;
    for (int i = ob - 1; i >= 0; --i) {
      if (++idx[i] < out_batch[i]) break;
      idx[i] = 0;
    }
  }
  return offsets;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool exact_accumulate) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: both operands need rank >= 2, got " +
                     shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  const int ra = a.rank(), rb = b.rank();
  const int m = a.shape()[ra - 2];
  const int k = a.shape()[ra - 1];
  const int k2 = b.shape()[rb - 2];
  const int n = b.shape()[rb - 1];
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ, " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  // numpy-style broadcast of the leading extents
  const int nb = std::max(batch_a.size(), batch_b.size());
  Shape out_batch(nb, 1);
  for (int i = 0; i < nb; ++i) {
    const int ea = i < nb - static_cast<int>(batch_a.size()) ? 1
                   : batch_a[i - (nb - batch_a.size())];
    const int eb = i < nb - static_cast<int>(batch_b.size()) ? 1
                   : batch_b[i - (nb - batch_b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("matmul: batch extents not broadcastable, " +
                       shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
    }
    out_batch[i] = std::max(ea, eb);
  }
  Shape out_shape = out_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const std::size_t a_mat = static_cast<std::size_t>(m) * k;
  const std::size_t b_mat = static_cast<std::size_t>(k) * n;
  const std::size_t o_mat = static_cast<std::size_t>(m) * n;
  auto offs_a = std::make_shared<std::vector<std::size_t>>(
      batch_offsets(out_batch, batch_a, a_mat));
  auto offs_b = std::make_shared<std::vector<std::size_t>>(
      batch_offsets(out_batch, batch_b, b_mat));
  const std::size_t batches = offs_a->size();

  Tensor out(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  ExactSum acc;
  for (std::size_t bi = 0; bi < batches; ++bi) {
    const double* ap = av.data() + (*offs_a)[bi];
    const double* bp = bv.data() + (*offs_b)[bi];
    double* op = ov.data() + bi * o_mat;
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        if (exact_accumulate) {
          acc.reset();
          for (int kk = 0; kk < k; ++kk) acc.add(ap[i * k + kk] * bp[kk * n + j]);
          op[i * n + j] = acc.result();
        } else {
          double s = 0.0;
          for (int kk = 0; kk < k; ++kk) s += ap[i * k + kk] * bp[kk * n + j];
          op[i * n + j] = s;
        }
      }
    }
  }

  DataPtr ad = a.data(), bd = b.data(), od = out.data();
  mark_and_record(out, {&a, &b}, [ad, bd, od, offs_a, offs_b, batches, m, n, k,
                                  a_mat, b_mat, o_mat] {
    if (od->grad.empty()) return;
    if (ad->requires_grad) ad->ensure_grad();
    if (bd->requires_grad) bd->ensure_grad();
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const double* gp = od->grad.data() + bi * o_mat;
      const double* ap = ad->value.data() + (*offs_a)[bi];
      const double* bp = bd->value.data() + (*offs_b)[bi];
      if (ad->requires_grad) {
        double* gap = ad->grad.data() + (*offs_a)[bi];
        for (int i = 0; i < m; ++i) {
          for (int kk = 0; kk < k; ++kk) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += gp[i * n + j] * bp[kk * n + j];
            gap[i * k + kk] += s;
          }
        }
      }
      if (bd->requires_grad) {
        double* gbp = bd->grad.data() + (*offs_b)[bi];
        for (int kk = 0; kk < k; ++kk) {
          for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int i = 0; i < m; ++i) s += ap[i * k + kk] * gp[i * n + j];
            gbp[kk * n + j] += s;
          }
        }
      }
    }
  });
  return out;
}

// --- softmax -----------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  check_finite(x, "softmax input");
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  ExactSum acc;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t r = 0; r < s.inner; ++r) {
      const std::size_t base = o * s.n * s.inner + r;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) m = std::max(m, xv[base + i * s.inner]);
      acc.reset();
      for (std::size_t i = 0; i < s.n; ++i) {
        const double e = std::exp(xv[base + i * s.inner] - m);
        ov[base + i * s.inner] = e;
        acc.add(e);
      }
      const double denom = acc.result();
      for (std::size_t i = 0; i < s.n; ++i) ov[base + i * s.inner] /= denom;
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, s] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t r = 0; r < s.inner; ++r) {
        const std::size_t base = o * s.n * s.inner + r;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) {
          dot += od->grad[base + i * s.inner] * od->value[base + i * s.inner];
        }
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t p = base + i * s.inner;
          xd->grad[p] += od->value[p] * (od->grad[p] - dot);
        }
      }
    }
  });
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  require_defined(x, "log_softmax");
  check_finite(x, "log_softmax input");
  const AxisSplit s = split_axis(x.shape(), axis, "log_softmax");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  ExactSum acc;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t r = 0; r < s.inner; ++r) {
      const std::size_t base = o * s.n * s.inner + r;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) m = std::max(m, xv[base + i * s.inner]);
      acc.reset();
      for (std::size_t i = 0; i < s.n; ++i) acc.add(std::exp(xv[base + i * s.inner] - m));
      const double lse = m + std::log(acc.result());
      for (std::size_t i = 0; i < s.n; ++i) {
        ov[base + i * s.inner] = xv[base + i * s.inner] - lse;
      }
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, s] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t r = 0; r < s.inner; ++r) {
        const std::size_t base = o * s.n * s.inner + r;
        double gsum = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) gsum += od->grad[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t p = base + i * s.inner;
          xd->grad[p] += od->grad[p] - std::exp(od->value[p]) * gsum;
        }
      }
    }
  });
  return out;
}

// --- reductions ----------------------------------------------------------------

Tensor reduce_sum(const Tensor& x, int axis) {
  require_defined(x, "reduce_sum");
  const AxisSplit s = split_axis(x.shape(), axis, "reduce_sum");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  Tensor out(out_shape, std::vector<double>(s.outer * s.inner, 0.0));
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.n; ++i) {
      for (std::size_t r = 0; r < s.inner; ++r) {
        ov[o * s.inner + r] += xv[(o * s.n + i) * s.inner + r];
      }
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, s] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.n; ++i) {
        for (std::size_t r = 0; r < s.inner; ++r) {
          xd->grad[(o * s.n + i) * s.inner + r] += od->grad[o * s.inner + r];
        }
      }
    }
  });
  return out;
}

Tensor reduce_mean(const Tensor& x, int axis) {
  Tensor sums = reduce_sum(x, axis);
  return scale(sums, 1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor reduce_max(const Tensor& x, int axis) {
  require_defined(x, "reduce_max");
  const AxisSplit s = split_axis(x.shape(), axis, "reduce_max");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  Tensor out(out_shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  auto arg = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t r = 0; r < s.inner; ++r) {
      std::size_t best = (o * s.n) * s.inner + r;
      double bv = xv[best];
      for (std::size_t i = 1; i < s.n; ++i) {
        const std::size_t p = (o * s.n + i) * s.inner + r;
        if (xv[p] > bv) {
          bv = xv[p];
          best = p;
        }
      }
      ov[o * s.inner + r] = bv;
      (*arg)[o * s.inner + r] = best;
    }
  }
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od, arg] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i) {
      xd->grad[(*arg)[i]] += od->grad[i];
    }
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  require_defined(x, "sum_all");
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  DataPtr xd = x.data(), od = out.data();
  mark_and_record(out, {&x}, [xd, od] {
    if (od->grad.empty() || !xd->requires_grad) return;
    xd->ensure_grad();
    for (double& g : xd->grad) g += od->grad[0];
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// --- verification ----------------------------------------------------------------

void check_finite(const Tensor& t, const char* context) {
  if (!t.defined()) throw ShapeError(std::string(context) + ": undefined tensor");
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(context) + ": non-finite value " +
                         std::to_string(v));
    }
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double step) {
  Tensor probe(x.shape(), x.values());
  probe.set_requires_grad(true);
  std::vector<double> analytic(x.numel(), 0.0);
  {
    Tape tape;
    Tensor y = f(probe);
    if (y.numel() != 1) {
      throw TapeError("grad_check: function must return a scalar");
    }
    tape.backward(y);
    if (probe.has_grad()) analytic = probe.grad();
  }
  auto eval = [&f](const Tensor& point) {
    const Tensor y = f(point);
    const double v = y.value();
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: non-finite value while probing");
    }
    return v;
  };
  double max_rel = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor hi(x.shape(), x.values());
    Tensor lo(x.shape(), x.values());
    hi.values()[i] += step;
    lo.values()[i] -= step;
    const double central = (eval(hi) - eval(lo)) / (2.0 * step);
    const double rel =
        std::fabs(analytic[i] - central) / std::max(1e-8, std::fabs(central));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace rba
