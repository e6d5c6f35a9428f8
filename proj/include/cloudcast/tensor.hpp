#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cloudcast/error.hpp"
#include "cloudcast/rng.hpp"

namespace cloudcast {

// Shapes are ordered [channel, height, width] for maps, [rows, cols] for
// matrices. Storage is flat row-major double.
using Shape = std::vector<int>;

int shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily by backward()
    bool requires_grad = false;
};

// Value-semantics handle onto shared storage. Tensors are immutable once they
// take part in a graph; only grad buffers accumulate. mutable_values() exists
// for loaders, initializers and finite-difference probes.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int dim(int axis) const { return shape()[static_cast<size_t>(axis)]; }
    int numel() const;
    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double item() const;  // scalar tensors only
    double at(std::initializer_list<int> index) const;

    bool grad_defined() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();
    void ensure_grad();

    // Detached value copy (fresh storage, no grad, no graph).
    Tensor detach_copy() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered log of primitive operations. Constructing a Tape makes it the
// active record for the current thread; ops append an entry whenever an
// input carries requires_grad. backward() zeroes every gradient reachable
// from the record and replays it in reverse, so repeated calls are
// bit-identical.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                std::shared_ptr<TensorImpl> output, std::function<void()> backward);

    void backward(const Tensor& loss);
    size_t size() const { return entries_.size(); }

  private:
    struct Entry {
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        std::function<void()> backward;
    };
    std::vector<Entry> entries_;
    Tape* prev_ = nullptr;
};

enum class Pad { Same, Valid };

// -- arithmetic ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // hadamard
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

// -- pointwise nonlinearities -------------------------------------------
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
// Generic pointwise op with caller-supplied derivative (test instrumentation).
Tensor unary_custom(const Tensor& x, const std::function<double(double)>& f,
                    const std::function<double(double)>& dfdx);

// -- convolutions and linear maps ---------------------------------------
// input [C_in,H,W], kernel [C_out,C_in,k,k] (k odd for Same), bias [C_out]
// or undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Pad pad = Pad::Same);
// input [C_in,L], kernel [C_out,C_in,k]; even k pads one extra zero on the
// right so Same preserves L.
Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Pad pad = Pad::Same);
// x [n], weights [m,n], bias [m] or undefined -> [m]
Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias);
// a [m,k], b [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// -- pooling -------------------------------------------------------------
Tensor global_avg_spatial(const Tensor& x);   // [C,H,W] -> [C]
Tensor global_max_spatial(const Tensor& x);   // [C,H,W] -> [C]
Tensor avg_over_channels(const Tensor& x);    // [C,H,W] -> [1,H,W]
Tensor max_over_channels(const Tensor& x);    // [C,H,W] -> [1,H,W]

// -- shape and broadcast helpers ----------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_channels(const Tensor& a, const Tensor& b);        // along axis 0
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);    // x [C,...], bias [C]
Tensor scale_channels(const Tensor& x, const Tensor& w);         // x [C,H,W], w [C]
Tensor scale_spatial(const Tensor& x, const Tensor& m);          // m [H,W] or [1,H,W]

// -- reductions and misc --------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool train);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// Central finite differences against reverse-mode gradients. Returns the
// worst relative error max(|ad-fd|) / max(|ad|,|fd|,1e-3) over every
// component of every points[i] entry.
double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 std::vector<Tensor> points, double step = 1e-5);

}  // namespace cloudcast
