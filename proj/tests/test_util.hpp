#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "apt/autodiff.hpp"
#include "apt/rng.hpp"
#include "apt/tensor.hpp"

namespace apt::test {

// central finite differences against an analytic gradient; returns the worst
// relative error over all elements (denominator floored to guard zeros)
inline double gradcheck(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        const Tensor& analytic, double step = 1e-5, double denom_floor = 1e-6) {
    double worst = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x, xm = x;
        xp[i] += step;
        xm[i] -= step;
        const double num = (f(xp) - f(xm)) / (2.0 * step);
        const double ana = analytic[i];
        const double rel =
            std::fabs(num - ana) / std::max({denom_floor, std::fabs(num), std::fabs(ana)});
        worst = std::max(worst, rel);
    }
    return worst;
}

inline bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// unique scratch directory under the build tree, wiped on construction
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) {
        path = std::filesystem::temp_directory_path() / ("apt_test_" + name);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace apt::test
