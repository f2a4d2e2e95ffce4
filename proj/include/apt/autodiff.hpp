#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "apt/tensor.hpp"

namespace apt {

// Reverse-mode tape over Tensor. Graphs are built define-by-run; backward()
// walks the tape once. The frozen-prior pass runs under NoGradGuard, which
// makes every op emit a constant node, so prior activations can never
// receive gradients.

class Node;
using NodePtr = std::shared_ptr<Node>;

class Node {
public:
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backfn;
    uint64_t visit_epoch = 0;
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor t, bool requires_grad = false);

    bool defined() const { return bool(node); }
    Tensor& value() { return node->val; }
    const Tensor& value() const { return node->val; }
    Tensor& grad() { return node->grad; }
    const Tensor& grad() const { return node->grad; }
    bool requires_grad() const { return node && node->requires_grad; }

    NodePtr node;
};

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Accumulates gradients into every reachable node that requires grad.
// root must be scalar. Grads of reachable nodes are zeroed first, so
// persistent parameter nodes start each step clean.
void backward(const Var& root);

Var constant(Tensor t);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var square(const Var& a);
Var silu(const Var& a);

// ---- linear algebra ----
// x: (..., In) with leading dims folded; W: (In, Out); b: (Out) or undefined
Var linear(const Var& x, const Var& W, const Var& b = Var());
// A: (B,M,K); B: (B,K,N), or (B,N,K) when trans_b
Var bmm(const Var& a, const Var& b, bool trans_b = false);

// ---- conv / norm / resampling ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var upsample_nearest2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var add_channel_bias(const Var& x, const Var& bias); // x: NCHW, bias: (C)

// ---- attention plumbing ----
Var softmax_last(const Var& x);
Var nchw_to_tokens(const Var& x);                 // (N,C,H,W) -> (N,H*W,C)
Var tokens_to_nchw(const Var& x, int h, int w);   // inverse
Var split_heads(const Var& x, int heads);         // (N,Q,C) -> (N*H,Q,C/H)
Var merge_heads(const Var& x, int heads);         // inverse
Var repeat_block0(const Var& x, int n);           // (B,...) -> (n*B,...) tiled
Var sum_dim1(const Var& x);                       // (N,H,Q,S) -> (N,Q,S)

// ---- reductions / statistics ----
Var sum_all(const Var& x);   // -> (1)
Var mean_all(const Var& x);  // -> (1)
Var mse(const Var& a, const Var& b); // mean((a-b)^2) -> (1)
Var channel_mean(const Var& x);             // (N,C,H,W) -> (N,C), over spatial
Var channel_std(const Var& x, double eps);  // population std over spatial
Var global_mean(const Var& x);              // (N,C,H,W) -> (N,1), over C,H,W
Var global_std(const Var& x, double eps);

Var reshape(const Var& x, std::vector<int> s);
Var stack_rows(const std::vector<Var>& rows); // each (D) -> (S,D)
Var take_row(const Var& x, int row);          // (R,D) -> (D)

// ---- raw kernels (exposed for benchmarks) ----
// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);

} // namespace apt
