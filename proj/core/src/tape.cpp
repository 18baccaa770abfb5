#include "lnz/tape.hpp"

#include <cmath>

namespace lnz {

namespace {
thread_local Tape* t_active = nullptr;
}

Tape::Tape() {
    prev_ = t_active;
    t_active = this;
}

Tape::~Tape() {
    if (t_active == this) t_active = prev_;
}

Tape* Tape::active() {
    return t_active;
}

bool grad_enabled() {
    return t_active != nullptr;
}

void Tape::record(std::function<void()> backward_rule) {
    nodes_.push_back(std::move(backward_rule));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) {
        throw StateError("backward called twice on the same graph; run a new forward pass");
    }
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss");
    }
    if (!loss.unsafe_data()->on_path) {
        throw StateError("loss was not produced by recorded operations");
    }
    if (!std::isfinite(loss.item())) {
        throw NumericsError("loss is not finite");
    }
    consumed_ = true;
    loss.ensure_grad()[0] = 1.f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        (*it)();
    }
}

NoGradGuard::NoGradGuard() {
    saved_ = t_active;
    t_active = nullptr;
}

NoGradGuard::~NoGradGuard() {
    t_active = saved_;
}

}  // namespace lnz
