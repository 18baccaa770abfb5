#pragma once

#include <functional>
#include <vector>

#include "lnz/tensor.hpp"

namespace lnz {

// Reverse-mode tape. One tape records one forward pass; backward replays
// the recorded nodes once, in reverse order, then marks itself consumed.
// Construction activates the tape on the current thread.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule.
    // Requires a scalar loss produced by recorded operations.
    void backward(const Tensor& loss);

    bool consumed() const { return consumed_; }
    size_t size() const { return nodes_.size(); }

    // Currently recording tape on this thread, or null.
    static Tape* active();

    // Appends a backward rule. Called by op implementations.
    void record(std::function<void()> backward_rule);

  private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

// Disables recording for its lifetime (inference / frozen-teacher paths).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    Tape* saved_;
};

// True when a tape is recording on this thread.
bool grad_enabled();

}  // namespace lnz
