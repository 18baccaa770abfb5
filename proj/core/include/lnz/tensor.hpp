#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lnz/common.hpp"

namespace lnz {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorData {
    Shape shape;
    // Value and gradient buffers are shared so that contiguous reshapes
    // alias storage instead of copying.
    std::shared_ptr<std::vector<float>> val;
    std::shared_ptr<std::vector<float>> grad;  // null until first accumulation
    bool requires_grad = false;
    // True when this tensor lies on the differentiation path of the
    // currently recording tape.
    bool on_path = false;
};
}  // namespace detail

// Dense row-major f32 tensor. Value semantics via a shared handle: copies
// alias the same storage, as all ops produce fresh tensors.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.f, bool requires_grad = false);

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(d_->val->size()); }

    float* data() { return d_->val->data(); }
    const float* data() const { return d_->val->data(); }
    std::span<float> values() { return {d_->val->data(), d_->val->size()}; }
    std::span<const float> values() const { return {d_->val->data(), d_->val->size()}; }

    // Scalar extraction; throws ShapeError unless numel() == 1.
    float item() const;

    float at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const { return d_->requires_grad; }
    // True when gradients should flow into/through this tensor.
    bool on_grad_path() const { return d_->requires_grad || d_->on_path; }
    Tensor& set_requires_grad(bool b);

    bool has_grad() const { return d_ && d_->grad != nullptr; }
    std::span<const float> grad() const;
    std::span<float> grad_mut();
    void zero_grad();

    // Grad buffer, allocated to zeros on first use.
    std::vector<float>& ensure_grad() const;

    // Contiguous reinterpretation sharing value and grad storage.
    Tensor reshape(Shape new_shape) const;

    // Deep copy of values only (no grad, no graph participation).
    Tensor clone() const;

    bool all_finite() const;

    detail::TensorData* unsafe_data() const { return d_.get(); }
    const std::shared_ptr<detail::TensorData>& handle() const { return d_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<detail::TensorData> d_;

    friend class Tape;
    friend Tensor make_op_output(Shape shape, const std::vector<Tensor>& inputs);
};

// Allocates the output of an op: on_path is set when a tape is recording
// and any input participates in differentiation.
Tensor make_op_output(Shape shape, const std::vector<Tensor>& inputs);

}  // namespace lnz
