#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nubseg {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Thread-local toggle that disables graph recording (inference / data paths).
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool f = true;
        return f;
    }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Multiply-accumulate counter used by the analytic cost estimator. Ops that
// perform MACs (conv, dense, matmul, attention) report into it when active.
class MacCounter {
public:
    static bool active() { return state().active; }
    static void add(std::int64_t n) {
        if (state().active) state().count += n;
    }
    static std::int64_t count() { return state().count; }

    struct Scope {
        Scope() {
            state().active = true;
            state().count = 0;
        }
        ~Scope() { state().active = false; }
        std::int64_t total() const { return state().count; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;
    };

private:
    struct State {
        bool active = false;
        std::int64_t count = 0;
    };
    static State& state() {
        thread_local State s;
        return s;
    }
};

}  // namespace nubseg
