#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace padkit {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces or receives NaN/Inf.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;

    std::span<double> grad_buffer();
};

/// Dense row-major array of doubles.
///
/// Copies are shallow handles to the same storage; use `clone()` for a deep
/// copy. A tensor whose `requires_grad()` is false is never mutated by any
/// operation and can be shared across threads.
class Tensor {
   public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    /// Size of `axis`; negative axes count from the end.
    std::size_t dim(int axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// Direct write access; only meant for leaves (parameters, inputs).
    std::span<double> mutable_data() { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::initializer_list<std::size_t> index) const;
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; all zeros when nothing has been accumulated yet.
    std::vector<double> grad() const;
    void zero_grad();

    /// Deep copy of the values, detached from any tape.
    Tensor clone(bool requires_grad = false) const;
    /// Same storage viewed as a constant.
    Tensor detach() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

   private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor wrap(std::shared_ptr<TensorImpl> impl);

    std::shared_ptr<TensorImpl> impl_;
};

Tensor wrap(std::shared_ptr<TensorImpl> impl);

/// Ordered record of differentiable operations. Nodes are appended as they
/// execute, so the list is always in topological order.
class Tape {
   public:
    struct Node {
        const char* name;
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        std::function<void()> backward;
    };

    void record(Node node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    /// Reverse-mode sweep from a scalar loss. Intermediate gradients are
    /// reset at the start of every sweep; leaf gradients accumulate, so a
    /// second call without `zero_grad` adds the same gradient again.
    void backward(const Tensor& loss);

    const std::vector<Node>& nodes() const { return nodes_; }

    /// Tape receiving records on the calling thread, or nullptr.
    static Tape* active();

   private:
    std::vector<Node> nodes_;
};

/// Installs a tape as the calling thread's recording target for the scope.
class TapeScope {
   public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

   private:
    Tape* previous_;
};

/// Suspends recording on the calling thread for the scope.
class NoGradScope {
   public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Tape* previous_;
};

/// Runs backward on the active tape.
void backward(const Tensor& loss);

}  // namespace padkit
