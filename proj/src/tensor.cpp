#include "cloudcast/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace cloudcast {

namespace {

thread_local Tape* g_active_tape = nullptr;

void check(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

bool tracked(const Tensor& t) {
    return g_active_tape != nullptr && t.requires_grad();
}

std::span<double> grad_of(const std::shared_ptr<TensorImpl>& impl) {
    if (impl->grad.size() != impl->data.size()) impl->grad.assign(impl->data.size(), 0.0);
    return impl->grad;
}

}  // namespace

int shape_numel(const Shape& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    const int n = shape_numel(shape);
    if (static_cast<size_t>(n) != values.size())
        throw ShapeError("shape " + shape_str(shape) + " expects " + std::to_string(n) +
                         " values, got " + std::to_string(values.size()));
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const int n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                  requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    const int n = shape_numel(shape);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!impl_) throw ShapeError("use of undefined tensor");
    return impl_->shape;
}

int Tensor::numel() const { return static_cast<int>(impl_->data.size()); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

std::span<const double> Tensor::values() const { return impl_->data; }

std::span<double> Tensor::mutable_values() { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) throw ShapeError("index rank mismatch");
    size_t flat = 0;
    size_t axis = 0;
    for (int i : index) {
        if (i < 0 || i >= s[axis]) throw ShapeError("index out of range");
        flat = flat * static_cast<size_t>(s[axis]) + static_cast<size_t>(i);
        ++axis;
    }
    return impl_->data[flat];
}

bool Tensor::grad_defined() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!grad_defined()) throw ShapeError("gradient not populated");
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::ensure_grad() {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::detach_copy() const {
    return Tensor(shape(), std::vector<double>(impl_->data.begin(), impl_->data.end()));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, std::function<void()> backward) {
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward() requires a scalar loss");
    // Fresh pass: reset every gradient the record can reach, then seed.
    for (auto& e : entries_) {
        e.output->grad.assign(e.output->data.size(), 0.0);
        for (auto& in : e.inputs)
            if (in->requires_grad) in->grad.assign(in->data.size(), 0.0);
    }
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->grad.empty()) continue;  // not reachable from the loss
        it->backward();
    }
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

Tensor make_output(Shape shape, std::vector<double> values, bool track) {
    Tensor out(std::move(shape), std::move(values));
    out.set_requires_grad(track);
    return out;
}

void record_op(const Tensor& out, std::vector<std::shared_ptr<TensorImpl>> inputs,
               std::function<void()> backward) {
    g_active_tape->record(std::move(inputs), out.impl(), std::move(backward));
}

}  // namespace

// ---------------------------------------------------------------------------
// arithmetic
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t n = a.impl()->data.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.impl()->data[i] + b.impl()->data[i];
    const bool track = tracked(a) || tracked(b);
    Tensor result = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto ia = a.impl(), ib = b.impl(), io = result.impl();
        record_op(result, {ia, ib}, [ia, ib, io]() {
            if (ia->requires_grad) {
                auto g = grad_of(ia);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i];
            }
            if (ib->requires_grad) {
                auto g = grad_of(ib);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i];
            }
        });
    }
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(),
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t n = a.impl()->data.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.impl()->data[i] - b.impl()->data[i];
    const bool track = tracked(a) || tracked(b);
    Tensor result = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto ia = a.impl(), ib = b.impl(), io = result.impl();
        record_op(result, {ia, ib}, [ia, ib, io]() {
            if (ia->requires_grad) {
                auto g = grad_of(ia);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i];
            }
            if (ib->requires_grad) {
                auto g = grad_of(ib);
                for (size_t i = 0; i < g.size(); ++i) g[i] -= io->grad[i];
            }
        });
    }
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t n = a.impl()->data.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.impl()->data[i] * b.impl()->data[i];
    const bool track = tracked(a) || tracked(b);
    Tensor result = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto ia = a.impl(), ib = b.impl(), io = result.impl();
        record_op(result, {ia, ib}, [ia, ib, io]() {
            if (ia->requires_grad) {
                auto g = grad_of(ia);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i] * ib->data[i];
            }
            if (ib->requires_grad) {
                auto g = grad_of(ib);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i] * ia->data[i];
            }
        });
    }
    return result;
}

Tensor div(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(),
          "div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t n = a.impl()->data.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.impl()->data[i] / b.impl()->data[i];
    const bool track = tracked(a) || tracked(b);
    Tensor result = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto ia = a.impl(), ib = b.impl(), io = result.impl();
        record_op(result, {ia, ib}, [ia, ib, io]() {
            if (ia->requires_grad) {
                auto g = grad_of(ia);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i] / ib->data[i];
            }
            if (ib->requires_grad) {
                auto g = grad_of(ib);
                for (size_t i = 0; i < g.size(); ++i)
                    g[i] -= io->grad[i] * ia->data[i] / (ib->data[i] * ib->data[i]);
            }
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double factor) {
    const size_t n = a.impl()->data.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.impl()->data[i] * factor;
    const bool track = tracked(a);
    Tensor result = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto ia = a.impl(), io = result.impl();
        record_op(result, {ia}, [ia, io, factor]() {
            auto g = grad_of(ia);
            for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i] * factor;
        });
    }
    return result;
}

Tensor add_scalar(const Tensor& a, double value) {
    const size_t n = a.impl()->data.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.impl()->data[i] + value;
    const bool track = tracked(a);
    Tensor result = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto ia = a.impl(), io = result.impl();
        record_op(result, {ia}, [ia, io]() {
            auto g = grad_of(ia);
            for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

namespace {

// df receives (input value, output value)
Tensor pointwise(const Tensor& x, const std::function<double(double)>& f,
                 const std::function<double(double, double)>& df) {
    const size_t n = x.impl()->data.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = f(x.impl()->data[i]);
    const bool track = tracked(x);
    Tensor result = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, df]() {
            auto g = grad_of(ix);
            for (size_t i = 0; i < g.size(); ++i)
                g[i] += io->grad[i] * df(ix->data[i], io->data[i]);
        });
    }
    return result;
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    return pointwise(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
    return pointwise(
        x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
    return pointwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    check(lo <= hi, "clamp: lo > hi");
    return pointwise(
        x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor unary_custom(const Tensor& x, const std::function<double(double)>& f,
                    const std::function<double(double)>& dfdx) {
    return pointwise(x, f, [dfdx](double v, double) { return dfdx(v); });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Pad pad) {
    check(input.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
    check(kernel.rank() == 4, "conv2d: kernel must be [Co,Ci,k,k], got " + shape_str(kernel.shape()));
    const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    check(kernel.dim(1) == ci, "conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                                   " input channels, input has " + std::to_string(ci));
    check(kh == kw, "conv2d: kernel must be square");
    if (pad == Pad::Same) check(kh % 2 == 1, "conv2d: Same padding requires odd kernel size");
    if (bias.defined())
        check(bias.rank() == 1 && bias.dim(0) == co, "conv2d: bias must be [C_out]");

    const int p = (pad == Pad::Same) ? (kh - 1) / 2 : 0;
    const int oh = (pad == Pad::Same) ? h : h - kh + 1;
    const int ow = (pad == Pad::Same) ? w : w - kw + 1;
    check(oh >= 1 && ow >= 1, "conv2d: kernel larger than input for Valid padding");

    std::vector<double> out(static_cast<size_t>(co) * oh * ow, 0.0);
    const double* in = input.impl()->data.data();
    const double* k = kernel.impl()->data.data();
    for (int o = 0; o < co; ++o) {
        double* outp = out.data() + static_cast<size_t>(o) * oh * ow;
        if (bias.defined()) {
            const double b = bias.impl()->data[static_cast<size_t>(o)];
            for (int i = 0; i < oh * ow; ++i) outp[i] = b;
        }
        for (int c = 0; c < ci; ++c) {
            const double* inp = in + static_cast<size_t>(c) * h * w;
            for (int dy = 0; dy < kh; ++dy) {
                for (int dx = 0; dx < kw; ++dx) {
                    const double kv =
                        k[((static_cast<size_t>(o) * ci + c) * kh + dy) * kw + dx];
                    if (kv == 0.0) continue;
                    const int y0 = std::max(0, p - dy);
                    const int y1 = std::min(oh, h + p - dy);
                    for (int y = y0; y < y1; ++y) {
                        const int iy = y + dy - p;
                        const int x0 = std::max(0, p - dx);
                        const int x1 = std::min(ow, w + p - dx);
                        const double* row = inp + static_cast<size_t>(iy) * w + (x0 + dx - p);
                        double* orow = outp + static_cast<size_t>(y) * ow + x0;
                        for (int x = 0; x < x1 - x0; ++x) orow[x] += kv * row[x];
                    }
                }
            }
        }
    }

    const bool track = tracked(input) || tracked(kernel) || (bias.defined() && tracked(bias));
    Tensor result = make_output({co, oh, ow}, std::move(out), track);
    if (track) {
        auto ii = input.impl(), ik = kernel.impl(), io = result.impl();
        auto ib = bias.defined() ? bias.impl() : nullptr;
        std::vector<std::shared_ptr<TensorImpl>> ins{ii, ik};
        if (ib) ins.push_back(ib);
        record_op(result, std::move(ins), [ii, ik, ib, io, ci, h, w, co, kh, kw, oh, ow, p]() {
            const double* g = io->grad.data();
            if (ii->requires_grad) {
                auto gi = grad_of(ii);
                for (int o = 0; o < co; ++o) {
                    const double* gout = g + static_cast<size_t>(o) * oh * ow;
                    for (int c = 0; c < ci; ++c) {
                        double* gin = gi.data() + static_cast<size_t>(c) * h * w;
                        for (int dy = 0; dy < kh; ++dy) {
                            for (int dx = 0; dx < kw; ++dx) {
                                const double kv =
                                    ik->data[((static_cast<size_t>(o) * ci + c) * kh + dy) * kw +
                                             dx];
                                if (kv == 0.0) continue;
                                const int y0 = std::max(0, p - dy);
                                const int y1 = std::min(oh, h + p - dy);
                                for (int y = y0; y < y1; ++y) {
                                    const int iy = y + dy - p;
                                    const int x0 = std::max(0, p - dx);
                                    const int x1 = std::min(ow, w + p - dx);
                                    double* grow =
                                        gin + static_cast<size_t>(iy) * w + (x0 + dx - p);
                                    const double* gorow = gout + static_cast<size_t>(y) * ow + x0;
                                    for (int x = 0; x < x1 - x0; ++x) grow[x] += kv * gorow[x];
                                }
                            }
                        }
                    }
                }
            }
            if (ik->requires_grad) {
                auto gk = grad_of(ik);
                for (int o = 0; o < co; ++o) {
                    const double* gout = g + static_cast<size_t>(o) * oh * ow;
                    for (int c = 0; c < ci; ++c) {
                        const double* inp = ii->data.data() + static_cast<size_t>(c) * h * w;
                        for (int dy = 0; dy < kh; ++dy) {
                            for (int dx = 0; dx < kw; ++dx) {
                                double acc = 0.0;
                                const int y0 = std::max(0, p - dy);
                                const int y1 = std::min(oh, h + p - dy);
                                for (int y = y0; y < y1; ++y) {
                                    const int iy = y + dy - p;
                                    const int x0 = std::max(0, p - dx);
                                    const int x1 = std::min(ow, w + p - dx);
                                    const double* row =
                                        inp + static_cast<size_t>(iy) * w + (x0 + dx - p);
                                    const double* gorow = gout + static_cast<size_t>(y) * ow + x0;
                                    for (int x = 0; x < x1 - x0; ++x) acc += row[x] * gorow[x];
                                }
                                gk[((static_cast<size_t>(o) * ci + c) * kh + dy) * kw + dx] += acc;
                            }
                        }
                    }
                }
            }
            if (ib && ib->requires_grad) {
                auto gb = grad_of(ib);
                for (int o = 0; o < co; ++o) {
                    double acc = 0.0;
                    const double* gout = g + static_cast<size_t>(o) * oh * ow;
                    for (int i = 0; i < oh * ow; ++i) acc += gout[i];
                    gb[static_cast<size_t>(o)] += acc;
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Pad pad) {
    check(input.rank() == 2, "conv1d: input must be [C,L], got " + shape_str(input.shape()));
    check(kernel.rank() == 3, "conv1d: kernel must be [Co,Ci,k], got " + shape_str(kernel.shape()));
    const int ci = input.dim(0), len = input.dim(1);
    const int co = kernel.dim(0), k = kernel.dim(2);
    check(kernel.dim(1) == ci, "conv1d: kernel expects " + std::to_string(kernel.dim(1)) +
                                   " input channels, input has " + std::to_string(ci));
    if (bias.defined())
        check(bias.rank() == 1 && bias.dim(0) == co, "conv1d: bias must be [C_out]");

    const int p = (pad == Pad::Same) ? (k - 1) / 2 : 0;
    const int ol = (pad == Pad::Same) ? len : len - k + 1;
    check(ol >= 1, "conv1d: kernel larger than input for Valid padding");

    std::vector<double> out(static_cast<size_t>(co) * ol, 0.0);
    for (int o = 0; o < co; ++o) {
        const double b = bias.defined() ? bias.impl()->data[static_cast<size_t>(o)] : 0.0;
        for (int t = 0; t < ol; ++t) {
            double acc = b;
            for (int c = 0; c < ci; ++c) {
                for (int dt = 0; dt < k; ++dt) {
                    const int it = t + dt - p;
                    if (it < 0 || it >= len) continue;
                    acc += input.impl()->data[static_cast<size_t>(c) * len + it] *
                           kernel.impl()->data[(static_cast<size_t>(o) * ci + c) * k + dt];
                }
            }
            out[static_cast<size_t>(o) * ol + t] = acc;
        }
    }

    const bool track = tracked(input) || tracked(kernel) || (bias.defined() && tracked(bias));
    Tensor result = make_output({co, ol}, std::move(out), track);
    if (track) {
        auto ii = input.impl(), ik = kernel.impl(), io = result.impl();
        auto ib = bias.defined() ? bias.impl() : nullptr;
        std::vector<std::shared_ptr<TensorImpl>> ins{ii, ik};
        if (ib) ins.push_back(ib);
        record_op(result, std::move(ins), [ii, ik, ib, io, ci, len, co, k, ol, p]() {
            const double* g = io->grad.data();
            for (int o = 0; o < co; ++o) {
                for (int t = 0; t < ol; ++t) {
                    const double go = g[static_cast<size_t>(o) * ol + t];
                    if (go == 0.0) continue;
                    for (int c = 0; c < ci; ++c) {
                        for (int dt = 0; dt < k; ++dt) {
                            const int it = t + dt - p;
                            if (it < 0 || it >= len) continue;
                            const size_t ki = (static_cast<size_t>(o) * ci + c) * k + dt;
                            const size_t xi = static_cast<size_t>(c) * len + it;
                            if (ii->requires_grad) grad_of(ii)[xi] += go * ik->data[ki];
                            if (ik->requires_grad) grad_of(ik)[ki] += go * ii->data[xi];
                        }
                    }
                    if (ib && ib->requires_grad) grad_of(ib)[static_cast<size_t>(o)] += go;
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// dense / matmul / transpose
// ---------------------------------------------------------------------------

Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
    check(x.rank() == 1, "dense: input must be [n], got " + shape_str(x.shape()));
    check(weights.rank() == 2, "dense: weights must be [m,n]");
    const int n = x.dim(0), m = weights.dim(0);
    check(weights.dim(1) == n, "dense: weights " + shape_str(weights.shape()) +
                                   " do not match input length " + std::to_string(n));
    if (bias.defined()) check(bias.rank() == 1 && bias.dim(0) == m, "dense: bias must be [m]");

    std::vector<double> out(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
        double acc = bias.defined() ? bias.impl()->data[static_cast<size_t>(i)] : 0.0;
        const double* wrow = weights.impl()->data.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) acc += wrow[j] * x.impl()->data[static_cast<size_t>(j)];
        out[static_cast<size_t>(i)] = acc;
    }

    const bool track = tracked(x) || tracked(weights) || (bias.defined() && tracked(bias));
    Tensor result = make_output({m}, std::move(out), track);
    if (track) {
        auto ix = x.impl(), iw = weights.impl(), io = result.impl();
        auto ib = bias.defined() ? bias.impl() : nullptr;
        std::vector<std::shared_ptr<TensorImpl>> ins{ix, iw};
        if (ib) ins.push_back(ib);
        record_op(result, std::move(ins), [ix, iw, ib, io, m, n]() {
            const double* g = io->grad.data();
            if (ix->requires_grad) {
                auto gx = grad_of(ix);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        gx[static_cast<size_t>(j)] +=
                            g[i] * iw->data[static_cast<size_t>(i) * n + j];
            }
            if (iw->requires_grad) {
                auto gw = grad_of(iw);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        gw[static_cast<size_t>(i) * n + j] +=
                            g[i] * ix->data[static_cast<size_t>(j)];
            }
            if (ib && ib->requires_grad) {
                auto gb = grad_of(ib);
                for (int i = 0; i < m; ++i) gb[static_cast<size_t>(i)] += g[i];
            }
        });
    }
    return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: both operands must be matrices");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    check(b.dim(0) == k, "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const double* pa = a.impl()->data.data();
    const double* pb = b.impl()->data.data();
    for (int i = 0; i < m; ++i) {
        for (int l = 0; l < k; ++l) {
            const double av = pa[static_cast<size_t>(i) * k + l];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<size_t>(l) * n;
            double* orow = out.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    const bool track = tracked(a) || tracked(b);
    Tensor result = make_output({m, n}, std::move(out), track);
    if (track) {
        auto ia = a.impl(), ib = b.impl(), io = result.impl();
        record_op(result, {ia, ib}, [ia, ib, io, m, k, n]() {
            const double* g = io->grad.data();
            if (ia->requires_grad) {
                auto ga = grad_of(ia);
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += g[static_cast<size_t>(i) * n + j] *
                                   ib->data[static_cast<size_t>(l) * n + j];
                        ga[static_cast<size_t>(i) * k + l] += acc;
                    }
            }
            if (ib->requires_grad) {
                auto gb = grad_of(ib);
                for (int l = 0; l < k; ++l)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += ia->data[static_cast<size_t>(i) * k + l] *
                                   g[static_cast<size_t>(i) * n + j];
                        gb[static_cast<size_t>(l) * n + j] += acc;
                    }
            }
        });
    }
    return result;
}

Tensor transpose2d(const Tensor& a) {
    check(a.rank() == 2, "transpose2d: operand must be a matrix");
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = a.impl()->data[static_cast<size_t>(i) * n + j];
    const bool track = tracked(a);
    Tensor result = make_output({n, m}, std::move(out), track);
    if (track) {
        auto ia = a.impl(), io = result.impl();
        record_op(result, {ia}, [ia, io, m, n]() {
            auto g = grad_of(ia);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    g[static_cast<size_t>(i) * n + j] += io->grad[static_cast<size_t>(j) * m + i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

namespace {

void check_chw(const Tensor& x, const char* name) {
    check(x.rank() == 3, std::string(name) + ": input must be [C,H,W], got " +
                             shape_str(x.shape()));
}

}  // namespace

Tensor global_avg_spatial(const Tensor& x) {
    check_chw(x, "global_avg_spatial");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> out(static_cast<size_t>(c), 0.0);
    for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        const double* p = x.impl()->data.data() + static_cast<size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) acc += p[j];
        out[static_cast<size_t>(i)] = acc / hw;
    }
    const bool track = tracked(x);
    Tensor result = make_output({c}, std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, c, hw]() {
            auto g = grad_of(ix);
            for (int i = 0; i < c; ++i) {
                const double gv = io->grad[static_cast<size_t>(i)] / hw;
                double* p = g.data() + static_cast<size_t>(i) * hw;
                for (int j = 0; j < hw; ++j) p[j] += gv;
            }
        });
    }
    return result;
}

Tensor global_max_spatial(const Tensor& x) {
    check_chw(x, "global_max_spatial");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> out(static_cast<size_t>(c));
    std::vector<int> argmax(static_cast<size_t>(c), 0);
    for (int i = 0; i < c; ++i) {
        const double* p = x.impl()->data.data() + static_cast<size_t>(i) * hw;
        int best = 0;
        for (int j = 1; j < hw; ++j)
            if (p[j] > p[best]) best = j;
        out[static_cast<size_t>(i)] = p[best];
        argmax[static_cast<size_t>(i)] = best;
    }
    const bool track = tracked(x);
    Tensor result = make_output({c}, std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, c, hw, argmax = std::move(argmax)]() {
            auto g = grad_of(ix);
            for (int i = 0; i < c; ++i)
                g[static_cast<size_t>(i) * hw + argmax[static_cast<size_t>(i)]] +=
                    io->grad[static_cast<size_t>(i)];
        });
    }
    return result;
}

Tensor avg_over_channels(const Tensor& x) {
    check_chw(x, "avg_over_channels");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
    std::vector<double> out(static_cast<size_t>(hw), 0.0);
    for (int i = 0; i < c; ++i) {
        const double* p = x.impl()->data.data() + static_cast<size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) out[static_cast<size_t>(j)] += p[j];
    }
    for (auto& v : out) v /= c;
    const bool track = tracked(x);
    Tensor result = make_output({1, h, w}, std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, c, hw]() {
            auto g = grad_of(ix);
            for (int i = 0; i < c; ++i) {
                double* p = g.data() + static_cast<size_t>(i) * hw;
                for (int j = 0; j < hw; ++j) p[j] += io->grad[static_cast<size_t>(j)] / c;
            }
        });
    }
    return result;
}

Tensor max_over_channels(const Tensor& x) {
    check_chw(x, "max_over_channels");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
    std::vector<double> out(static_cast<size_t>(hw));
    std::vector<int> argmax(static_cast<size_t>(hw), 0);
    for (int j = 0; j < hw; ++j) {
        int best = 0;
        for (int i = 1; i < c; ++i)
            if (x.impl()->data[static_cast<size_t>(i) * hw + j] >
                x.impl()->data[static_cast<size_t>(best) * hw + j])
                best = i;
        out[static_cast<size_t>(j)] = x.impl()->data[static_cast<size_t>(best) * hw + j];
        argmax[static_cast<size_t>(j)] = best;
    }
    const bool track = tracked(x);
    Tensor result = make_output({1, h, w}, std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, hw, argmax = std::move(argmax)]() {
            auto g = grad_of(ix);
            for (int j = 0; j < hw; ++j)
                g[static_cast<size_t>(argmax[static_cast<size_t>(j)]) * hw + j] +=
                    io->grad[static_cast<size_t>(j)];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// shape and broadcast helpers
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    check(shape_numel(shape) == x.numel(), "reshape: element count mismatch, " +
                                               shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.impl()->data.begin(), x.impl()->data.end());
    const bool track = tracked(x);
    Tensor result = make_output(std::move(shape), std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io]() {
            auto g = grad_of(ix);
            for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i];
        });
    }
    return result;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check(a.rank() == b.rank() && a.rank() >= 1, "concat_channels: rank mismatch");
    for (int i = 1; i < a.rank(); ++i)
        check(a.dim(i) == b.dim(i), "concat_channels: trailing dimensions differ");
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    std::vector<double> out;
    out.reserve(a.impl()->data.size() + b.impl()->data.size());
    out.insert(out.end(), a.impl()->data.begin(), a.impl()->data.end());
    out.insert(out.end(), b.impl()->data.begin(), b.impl()->data.end());
    const bool track = tracked(a) || tracked(b);
    Tensor result = make_output(std::move(shape), std::move(out), track);
    if (track) {
        auto ia = a.impl(), ib = b.impl(), io = result.impl();
        const size_t na = ia->data.size();
        record_op(result, {ia, ib}, [ia, ib, io, na]() {
            if (ia->requires_grad) {
                auto g = grad_of(ia);
                for (size_t i = 0; i < na; ++i) g[i] += io->grad[i];
            }
            if (ib->requires_grad) {
                auto g = grad_of(ib);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[na + i];
            }
        });
    }
    return result;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    check(x.rank() >= 2, "add_channel_bias: input must have a channel axis");
    check(bias.rank() == 1 && bias.dim(0) == x.dim(0),
          "add_channel_bias: bias length must equal channel count");
    const int c = x.dim(0);
    const int inner = x.numel() / c;
    std::vector<double> out(x.impl()->data.size());
    for (int i = 0; i < c; ++i) {
        const double b = bias.impl()->data[static_cast<size_t>(i)];
        const double* p = x.impl()->data.data() + static_cast<size_t>(i) * inner;
        double* q = out.data() + static_cast<size_t>(i) * inner;
        for (int j = 0; j < inner; ++j) q[j] = p[j] + b;
    }
    const bool track = tracked(x) || tracked(bias);
    Tensor result = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto ix = x.impl(), ib = bias.impl(), io = result.impl();
        record_op(result, {ix, ib}, [ix, ib, io, c, inner]() {
            if (ix->requires_grad) {
                auto g = grad_of(ix);
                for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i];
            }
            if (ib->requires_grad) {
                auto g = grad_of(ib);
                for (int i = 0; i < c; ++i) {
                    double acc = 0.0;
                    const double* p = io->grad.data() + static_cast<size_t>(i) * inner;
                    for (int j = 0; j < inner; ++j) acc += p[j];
                    g[static_cast<size_t>(i)] += acc;
                }
            }
        });
    }
    return result;
}

Tensor scale_channels(const Tensor& x, const Tensor& w) {
    check_chw(x, "scale_channels");
    check(w.rank() == 1 && w.dim(0) == x.dim(0),
          "scale_channels: weight length must equal channel count");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> out(x.impl()->data.size());
    for (int i = 0; i < c; ++i) {
        const double s = w.impl()->data[static_cast<size_t>(i)];
        const double* p = x.impl()->data.data() + static_cast<size_t>(i) * hw;
        double* q = out.data() + static_cast<size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) q[j] = p[j] * s;
    }
    const bool track = tracked(x) || tracked(w);
    Tensor result = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto ix = x.impl(), iw = w.impl(), io = result.impl();
        record_op(result, {ix, iw}, [ix, iw, io, c, hw]() {
            if (ix->requires_grad) {
                auto g = grad_of(ix);
                for (int i = 0; i < c; ++i) {
                    const double s = iw->data[static_cast<size_t>(i)];
                    for (int j = 0; j < hw; ++j)
                        g[static_cast<size_t>(i) * hw + j] +=
                            io->grad[static_cast<size_t>(i) * hw + j] * s;
                }
            }
            if (iw->requires_grad) {
                auto g = grad_of(iw);
                for (int i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < hw; ++j)
                        acc += io->grad[static_cast<size_t>(i) * hw + j] *
                               ix->data[static_cast<size_t>(i) * hw + j];
                    g[static_cast<size_t>(i)] += acc;
                }
            }
        });
    }
    return result;
}

Tensor scale_spatial(const Tensor& x, const Tensor& m) {
    check_chw(x, "scale_spatial");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
    const bool ok = (m.rank() == 2 && m.dim(0) == h && m.dim(1) == w) ||
                    (m.rank() == 3 && m.dim(0) == 1 && m.dim(1) == h && m.dim(2) == w);
    check(ok, "scale_spatial: map must be [H,W] or [1,H,W] matching input");
    std::vector<double> out(x.impl()->data.size());
    for (int i = 0; i < c; ++i) {
        const double* p = x.impl()->data.data() + static_cast<size_t>(i) * hw;
        double* q = out.data() + static_cast<size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) q[j] = p[j] * m.impl()->data[static_cast<size_t>(j)];
    }
    const bool track = tracked(x) || tracked(m);
    Tensor result = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto ix = x.impl(), im = m.impl(), io = result.impl();
        record_op(result, {ix, im}, [ix, im, io, c, hw]() {
            if (ix->requires_grad) {
                auto g = grad_of(ix);
                for (int i = 0; i < c; ++i)
                    for (int j = 0; j < hw; ++j)
                        g[static_cast<size_t>(i) * hw + j] +=
                            io->grad[static_cast<size_t>(i) * hw + j] *
                            im->data[static_cast<size_t>(j)];
            }
            if (im->requires_grad) {
                auto g = grad_of(im);
                for (int j = 0; j < hw; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < c; ++i)
                        acc += io->grad[static_cast<size_t>(i) * hw + j] *
                               ix->data[static_cast<size_t>(i) * hw + j];
                    g[static_cast<size_t>(j)] += acc;
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// reductions, softmax, dropout
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.impl()->data) acc += v;
    const bool track = tracked(x);
    Tensor result = make_output({1}, {acc}, track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io]() {
            auto g = grad_of(ix);
            for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[0];
        });
    }
    return result;
}

Tensor mean(const Tensor& x) {
    const int n = x.numel();
    double acc = 0.0;
    for (double v : x.impl()->data) acc += v;
    const bool track = tracked(x);
    Tensor result = make_output({1}, {acc / n}, track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, n]() {
            auto g = grad_of(ix);
            for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[0] / n;
        });
    }
    return result;
}

Tensor softmax(const Tensor& x, int axis) {
    check(x.rank() == 1 || x.rank() == 2, "softmax: supports vectors and matrices");
    check(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
    const int lanes = (x.rank() == 1) ? 1 : (axis == 1 ? x.dim(0) : x.dim(1));
    const int lane_len = (x.rank() == 1) ? x.dim(0) : x.dim(axis);
    // stride between consecutive elements of a lane, and between lanes
    const int step = (x.rank() == 1 || axis == 1) ? 1 : x.dim(1);
    const int lane_stride = (x.rank() == 1) ? 0 : (axis == 1 ? x.dim(1) : 1);

    std::vector<double> out(x.impl()->data.size());
    const double* in = x.impl()->data.data();
    for (int l = 0; l < lanes; ++l) {
        const size_t base = static_cast<size_t>(l) * lane_stride;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < lane_len; ++i) mx = std::max(mx, in[base + static_cast<size_t>(i) * step]);
        double denom = 0.0;
        for (int i = 0; i < lane_len; ++i) {
            const double e = std::exp(in[base + static_cast<size_t>(i) * step] - mx);
            out[base + static_cast<size_t>(i) * step] = e;
            denom += e;
        }
        for (int i = 0; i < lane_len; ++i) out[base + static_cast<size_t>(i) * step] /= denom;
    }

    const bool track = tracked(x);
    Tensor result = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, lanes, lane_len, step, lane_stride]() {
            auto g = grad_of(ix);
            for (int l = 0; l < lanes; ++l) {
                const size_t base = static_cast<size_t>(l) * lane_stride;
                double dot = 0.0;
                for (int i = 0; i < lane_len; ++i) {
                    const size_t idx = base + static_cast<size_t>(i) * step;
                    dot += io->grad[idx] * io->data[idx];
                }
                for (int i = 0; i < lane_len; ++i) {
                    const size_t idx = base + static_cast<size_t>(i) * step;
                    g[idx] += io->data[idx] * (io->grad[idx] - dot);
                }
            }
        });
    }
    return result;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool train) {
    check(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0,1)");
    if (!train || rate == 0.0) return x;
    const size_t n = x.impl()->data.size();
    std::vector<double> mask(n);
    const double keep = 1.0 - rate;
    for (auto& m : mask) m = rng.bernoulli(rate) ? 0.0 : 1.0 / keep;
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = x.impl()->data[i] * mask[i];
    const bool track = tracked(x);
    Tensor result = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto ix = x.impl(), io = result.impl();
        record_op(result, {ix}, [ix, io, mask = std::move(mask)]() {
            auto g = grad_of(ix);
            for (size_t i = 0; i < g.size(); ++i) g[i] += io->grad[i] * mask[i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 std::vector<Tensor> points, double step) {
    check(step > 0.0, "gradcheck: step must be positive");
    for (auto& p : points) p.set_requires_grad(true);

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = f(points);
        if (loss.numel() != 1) throw ShapeError("gradcheck: f must be scalar-valued");
        if (!std::isfinite(loss.item())) throw ParseError("gradcheck: non-finite loss value");
        tape.backward(loss);
        for (auto& p : points) {
            p.ensure_grad();
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        }
    }

    auto eval = [&]() {
        Tensor y = f(points);  // no tape active: value-only pass
        return y.item();
    };

    double worst = 0.0;
    for (size_t pi = 0; pi < points.size(); ++pi) {
        auto vals = points[pi].mutable_values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + step;
            const double up = eval();
            vals[i] = saved - step;
            const double down = eval();
            vals[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw ParseError("gradcheck: non-finite value during finite differences");
            const double fd = (up - down) / (2.0 * step);
            const double ad = analytic[pi][i];
            const double rel =
                std::fabs(ad - fd) / std::max({std::fabs(ad), std::fabs(fd), 1e-3});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace cloudcast
