#include "padkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace padkit {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::span<double> TensorImpl::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (numel_of(shape) != data.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError("non-finite value in tensor data");
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(shape, std::vector<double>(numel_of(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return Tensor(shape, std::vector<double>(numel_of(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range");
    return impl_->shape[static_cast<std::size_t>(a)];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto idx : index) {
        if (idx >= impl_->shape[i]) throw DimensionError("index out of range");
        flat = flat * impl_->shape[i] + idx;
        ++i;
    }
    return impl_->data[flat];
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
    if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
    if (!impl_->requires_grad) return *this;
    return clone(false);
}

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw DimensionError("backward requires a scalar loss");
    }
    if (nodes_.empty()) throw std::logic_error("backward on an empty tape");
    for (auto& node : nodes_) node.output->grad.clear();
    if (!loss.requires_grad()) return;
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->backward();
    }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (tape == nullptr) throw std::logic_error("backward without an active tape");
    tape->backward(loss);
}

}  // namespace padkit
