#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "apt/rng.hpp"

namespace apt {

// Dense row-major double tensor. Everything in the trainer runs in double:
// the acceptance tolerances on EMA closed forms and finite-difference
// gradient checks leave no headroom for float.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(size_t(numel_of(shape)), 0.0) {}
    Tensor(std::vector<int> s, double fill)
        : shape(std::move(s)), v(size_t(numel_of(shape)), fill) {}

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double val) { return Tensor(std::move(s), val); }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = stddev * rng.normal();
        return t;
    }

    int64_t numel() const { return int64_t(v.size()); }
    int ndim() const { return int(shape.size()); }
    int dim(int i) const { return shape[size_t(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](int64_t i) { return v[size_t(i)]; }
    double operator[](int64_t i) const { return v[size_t(i)]; }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel()) throw std::invalid_argument("tensor: reshape numel mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.v = v;
        return t;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

} // namespace apt
