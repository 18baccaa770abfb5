#include "lnz/tensor.hpp"

#include <cmath>
#include <sstream>

#include "lnz/tape.hpp"

namespace lnz {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {
std::shared_ptr<detail::TensorData> alloc(Shape shape, bool requires_grad) {
    for (int64_t d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    }
    auto t = std::make_shared<detail::TensorData>();
    t->val = std::make_shared<std::vector<float>>(static_cast<size_t>(shape_numel(shape)), 0.f);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return t;
}
}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(alloc(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto t = alloc(std::move(shape), requires_grad);
    for (float& v : *t->val) v = value;
    return Tensor(std::move(t));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto t = std::make_shared<detail::TensorData>();
    t->val = std::make_shared<std::vector<float>>(std::move(values));
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return Tensor(std::move(t));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
    auto t = alloc(std::move(shape), requires_grad);
    for (float& v : *t->val) v = rng.normal(0.f, stddev);
    return Tensor(std::move(t));
}

float Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    }
    return (*d_->val)[0];
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
        throw IndexError("index rank mismatch");
    }
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) {
        if (v < 0 || v >= d_->shape[static_cast<size_t>(i)]) throw IndexError("index out of range");
        off = off * d_->shape[static_cast<size_t>(i)] + v;
        ++i;
    }
    return (*d_->val)[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
}

std::span<const float> Tensor::grad() const {
    if (!has_grad()) throw StateError("tensor has no gradient");
    return {d_->grad->data(), d_->grad->size()};
}

std::span<float> Tensor::grad_mut() {
    return {ensure_grad().data(), ensure_grad().size()};
}

void Tensor::zero_grad() {
    if (d_ && d_->grad) d_->grad.reset();
}

std::vector<float>& Tensor::ensure_grad() const {
    if (!d_->grad) {
        d_->grad = std::make_shared<std::vector<float>>(d_->val->size(), 0.f);
    }
    return *d_->grad;
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
    }
    // Gradients flowing into either view must land in one buffer, so the
    // buffer is pinned before aliasing when the tensor is differentiated.
    if (on_grad_path()) ensure_grad();
    auto t = std::make_shared<detail::TensorData>();
    t->shape = std::move(new_shape);
    t->val = d_->val;
    t->grad = d_->grad;
    t->requires_grad = false;
    t->on_path = on_grad_path();
    return Tensor(std::move(t));
}

Tensor Tensor::clone() const {
    auto t = std::make_shared<detail::TensorData>();
    t->shape = d_->shape;
    t->val = std::make_shared<std::vector<float>>(*d_->val);
    return Tensor(std::move(t));
}

bool Tensor::all_finite() const {
    for (float v : *d_->val) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor make_op_output(Shape shape, const std::vector<Tensor>& inputs) {
    bool path = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) {
            if (t.defined() && t.on_grad_path()) {
                path = true;
                break;
            }
        }
    }
    auto t = alloc(std::move(shape), false);
    t->on_path = path;
    return Tensor(std::move(t));
}

}  // namespace lnz
