#pragma once

#include <cmath>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "unlearn/common.hpp"

namespace unlearn {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int vocab_size = 0;
    int max_seq_len = 192;
    double ln_epsilon = 1e-5;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq_len < 1) {
            throw std::invalid_argument("model config: all counts must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("model config: d_model must be divisible by n_heads");
        }
        if (!(ln_epsilon > 0.0)) {
            throw std::invalid_argument("model config: ln_epsilon must be positive");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<double> w;

    size_t size() const { return w.size(); }
    double* data() { return w.data(); }
    const double* data() const { return w.data(); }
};

struct LoraSpec {
    int rank = 8;
    double alpha = 16.0;
    bool operator==(const LoraSpec&) const = default;
};

// All stored values are exactly representable in 32-bit floats: the optimizer
// snaps after every update and init snaps at creation, so checkpoints
// round-trip bit-exactly.
inline double f32_snap(double x) { return static_cast<double>(static_cast<float>(x)); }

struct Parameters {
    ModelConfig config;
    std::vector<Tensor> tensors;
    std::unordered_map<std::string, int> index;
    std::optional<LoraSpec> lora;

    int add(const std::string& name, int rows, int cols) {
        int id = static_cast<int>(tensors.size());
        tensors.push_back({name, rows, cols, std::vector<double>(static_cast<size_t>(rows) * cols, 0.0)});
        index.emplace(name, id);
        return id;
    }

    bool has(const std::string& name) const { return index.count(name) > 0; }

    int idx(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) {
            throw std::invalid_argument("unknown tensor: " + name);
        }
        return it->second;
    }

    Tensor& at(const std::string& name) { return tensors[static_cast<size_t>(idx(name))]; }
    const Tensor& at(const std::string& name) const { return tensors[static_cast<size_t>(idx(name))]; }

    size_t total_parameters() const {
        size_t n = 0;
        for (const auto& t : tensors) {
            n += t.size();
        }
        return n;
    }
};

namespace nn {

// Y[M x N] = X[M x K] * W^T where W is [N x K] row-major.
inline void matmul_xwt(const double* __restrict__ X, const double* __restrict__ W, double* __restrict__ Y, int M,
                       int K, int N) {
    for (int m = 0; m < M; ++m) {
        const double* x = X + static_cast<size_t>(m) * K;
        double* y = Y + static_cast<size_t>(m) * N;
        int n = 0;
        for (; n + 4 <= N; n += 4) {
            const double* w0 = W + static_cast<size_t>(n) * K;
            const double* w1 = w0 + K;
            const double* w2 = w1 + K;
            const double* w3 = w2 + K;
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            for (int k = 0; k < K; ++k) {
                double xv = x[k];
                a0 += xv * w0[k];
                a1 += xv * w1[k];
                a2 += xv * w2[k];
                a3 += xv * w3[k];
            }
            y[n] = a0;
            y[n + 1] = a1;
            y[n + 2] = a2;
            y[n + 3] = a3;
        }
        for (; n < N; ++n) {
            const double* w = W + static_cast<size_t>(n) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) {
                acc += x[k] * w[k];
            }
            y[n] = acc;
        }
    }
}

// dX[M x K] += dY[M x N] * W[N x K].
inline void matmul_acc_dxw(const double* __restrict__ dY, const double* __restrict__ W, double* __restrict__ dX,
                           int M, int N, int K) {
    for (int m = 0; m < M; ++m) {
        const double* dy = dY + static_cast<size_t>(m) * N;
        double* dx = dX + static_cast<size_t>(m) * K;
        int n = 0;
        for (; n + 4 <= N; n += 4) {
            const double* w0 = W + static_cast<size_t>(n) * K;
            const double* w1 = w0 + K;
            const double* w2 = w1 + K;
            const double* w3 = w2 + K;
            double g0 = dy[n], g1 = dy[n + 1], g2 = dy[n + 2], g3 = dy[n + 3];
            for (int k = 0; k < K; ++k) {
                dx[k] += g0 * w0[k] + g1 * w1[k] + g2 * w2[k] + g3 * w3[k];
            }
        }
        for (; n < N; ++n) {
            const double* w = W + static_cast<size_t>(n) * K;
            double g = dy[n];
            for (int k = 0; k < K; ++k) {
                dx[k] += g * w[k];
            }
        }
    }
}

// dW[N x K] += dY[M x N]^T * X[M x K].
inline void matmul_acc_dw(const double* __restrict__ dY, const double* __restrict__ X, double* __restrict__ dW,
                          int M, int N, int K) {
    int m = 0;
    for (; m + 4 <= M; m += 4) {
        const double* x0 = X + static_cast<size_t>(m) * K;
        const double* x1 = x0 + K;
        const double* x2 = x1 + K;
        const double* x3 = x2 + K;
        const double* dy0 = dY + static_cast<size_t>(m) * N;
        const double* dy1 = dy0 + N;
        const double* dy2 = dy1 + N;
        const double* dy3 = dy2 + N;
        for (int n = 0; n < N; ++n) {
            double* w = dW + static_cast<size_t>(n) * K;
            double g0 = dy0[n], g1 = dy1[n], g2 = dy2[n], g3 = dy3[n];
            for (int k = 0; k < K; ++k) {
                w[k] += g0 * x0[k] + g1 * x1[k] + g2 * x2[k] + g3 * x3[k];
            }
        }
    }
    for (; m < M; ++m) {
        const double* x = X + static_cast<size_t>(m) * K;
        const double* dy = dY + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            double* w = dW + static_cast<size_t>(n) * K;
            double g = dy[n];
            for (int k = 0; k < K; ++k) {
                w[k] += g * x[k];
            }
        }
    }
}

inline void layer_norm_row(const double* x, const double* gamma, const double* beta, double eps, int d, double* out,
                           double* xhat, double* rstd_out) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) {
        mean += x[j];
    }
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        double c = x[j] - mean;
        var += c * c;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
        double h = (x[j] - mean) * rstd;
        xhat[j] = h;
        out[j] = gamma[j] * h + beta[j];
    }
    *rstd_out = rstd;
}

// dx += LN backward; accumulates parameter grads when given buffers.
inline void layer_norm_backward_row(const double* dy, const double* xhat, double rstd, const double* gamma, int d,
                                    double* dx, double* dgamma, double* dbeta) {
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < d; ++j) {
        double dxh = dy[j] * gamma[j];
        m1 += dxh;
        m2 += dxh * xhat[j];
    }
    m1 /= d;
    m2 /= d;
    for (int j = 0; j < d; ++j) {
        double dxh = dy[j] * gamma[j];
        dx[j] += rstd * (dxh - m1 - xhat[j] * m2);
    }
    if (dgamma) {
        for (int j = 0; j < d; ++j) {
            dgamma[j] += dy[j] * xhat[j];
            dbeta[j] += dy[j];
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

inline double gelu_grad(double x) {
    const double inv_sqrt2 = 0.7071067811865476;
    const double inv_sqrt_2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline void softmax_in_place(double* x, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        z += x[i];
    }
    double inv = 1.0 / z;
    for (int i = 0; i < n; ++i) {
        x[i] *= inv;
    }
}

inline double log_sum_exp(const double* x, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        z += std::exp(x[i] - mx);
    }
    return mx + std::log(z);
}

}  // namespace nn

namespace detail {

inline std::string blk(int l, const char* suffix) { return "blk" + std::to_string(l) + "." + suffix; }

inline void fill_gaussian(Tensor& t, Rng& rng, double std_dev) {
    for (auto& x : t.w) {
        x = f32_snap(rng.gauss() * std_dev);
    }
}

}  // namespace detail

/// Deterministic initialization. Output-side projections are scaled down by
/// the residual depth and the unembedding is small, which keeps the initial
/// next-token distribution near-uniform (entropy within 1% of log |V|).
inline Parameters init_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Parameters p;
    p.config = config;
    const int d = config.d_model;

    p.add("tok_emb", config.vocab_size, d);
    p.add("pos_emb", config.max_seq_len, d);
    for (int l = 0; l < config.n_layers; ++l) {
        p.add(detail::blk(l, "ln1.g"), d, 1);
        p.add(detail::blk(l, "ln1.b"), d, 1);
        p.add(detail::blk(l, "attn.wq"), d, d);
        p.add(detail::blk(l, "attn.wk"), d, d);
        p.add(detail::blk(l, "attn.wv"), d, d);
        p.add(detail::blk(l, "attn.wo"), d, d);
        p.add(detail::blk(l, "ln2.g"), d, 1);
        p.add(detail::blk(l, "ln2.b"), d, 1);
        p.add(detail::blk(l, "ffn.w1"), config.d_ff, d);
        p.add(detail::blk(l, "ffn.w2"), d, config.d_ff);
    }
    p.add("ln_f.g", d, 1);
    p.add("ln_f.b", d, 1);
    p.add("w_u", config.vocab_size, d);

    Rng root = Rng(seed).fork("init");
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * config.n_layers);
    for (auto& t : p.tensors) {
        Rng rng = root.fork(t.name);
        if (t.name == "w_u") {
            detail::fill_gaussian(t, rng, 0.01);
        } else if (t.name.ends_with("attn.wo") || t.name.ends_with("ffn.w2")) {
            detail::fill_gaussian(t, rng, resid_std);
        } else if (t.name.ends_with(".g")) {
            std::fill(t.w.begin(), t.w.end(), 1.0);
        } else if (t.name.ends_with(".b")) {
            std::fill(t.w.begin(), t.w.end(), 0.0);
        } else {
            detail::fill_gaussian(t, rng, base_std);
        }
    }
    return p;
}

inline const std::array<const char*, 4>& lora_target_projections() {
    static const std::array<const char*, 4> names = {"attn.wq", "attn.wk", "attn.wv", "attn.wo"};
    return names;
}

/// Rank-r adapter pairs on every attention projection. Factor A is random,
/// factor B starts at zero, so a freshly attached model reproduces the frozen
/// base exactly.
inline void attach_lora(Parameters& p, int rank, double alpha, uint64_t seed) {
    if (rank < 1) {
        throw std::invalid_argument("attach_lora: rank must be >= 1");
    }
    if (rank > p.config.d_model) {
        throw std::invalid_argument("attach_lora: rank exceeds d_model");
    }
    if (p.lora) {
        if (p.lora->rank == rank && p.lora->alpha == alpha) {
            return;
        }
        throw std::invalid_argument("attach_lora: adapters already attached with a different spec");
    }
    Rng root = Rng(seed).fork("lora");
    for (int l = 0; l < p.config.n_layers; ++l) {
        for (const char* proj : lora_target_projections()) {
            std::string base = detail::blk(l, proj);
            int a = p.add(base + ".lora_a", rank, p.config.d_model);
            Rng rng = root.fork(p.tensors[static_cast<size_t>(a)].name);
            detail::fill_gaussian(p.tensors[static_cast<size_t>(a)], rng, 0.02);
            p.add(base + ".lora_b", p.config.d_model, rank);
        }
    }
    p.lora = LoraSpec{rank, alpha};
}

enum class TuningKind { Full, LastLayer, LoRA };

struct TuningMode {
    TuningKind kind = TuningKind::Full;
    int lora_rank = 8;
    double lora_alpha = 16.0;

    static TuningMode full() { return {TuningKind::Full}; }
    static TuningMode last_layer() { return {TuningKind::LastLayer}; }
    static TuningMode lora(int rank = 8, double alpha = 16.0) { return {TuningKind::LoRA, rank, alpha}; }
};

inline const char* tuning_mode_name(const TuningMode& m) {
    switch (m.kind) {
        case TuningKind::Full: return "full";
        case TuningKind::LastLayer: return "last-layer";
        case TuningKind::LoRA: return "lora";
    }
    return "?";
}

struct ParamSelection {
    std::vector<int> tensor_ids;
    std::vector<char> mask;  // per tensor id

    size_t parameter_count(const Parameters& p) const {
        size_t n = 0;
        for (int id : tensor_ids) {
            n += p.tensors[static_cast<size_t>(id)].size();
        }
        return n;
    }

    bool selected(int id) const { return id < static_cast<int>(mask.size()) && mask[static_cast<size_t>(id)]; }
};

/// Full: everything. LastLayer: unembedding + final layer norm. LoRA: attaches
/// adapters if absent and selects only them.
inline ParamSelection trainable_selection(Parameters& p, const TuningMode& mode, uint64_t seed = 0x6c6f7261) {
    ParamSelection sel;
    switch (mode.kind) {
        case TuningKind::Full:
            for (int i = 0; i < static_cast<int>(p.tensors.size()); ++i) {
                sel.tensor_ids.push_back(i);
            }
            break;
        case TuningKind::LastLayer:
            sel.tensor_ids = {p.idx("w_u"), p.idx("ln_f.g"), p.idx("ln_f.b")};
            break;
        case TuningKind::LoRA: {
            if (mode.lora_rank > p.config.d_model) {
                throw std::invalid_argument("trainable_selection: LoRA rank exceeds d_model");
            }
            attach_lora(p, mode.lora_rank, mode.lora_alpha, seed);
            for (int i = 0; i < static_cast<int>(p.tensors.size()); ++i) {
                if (p.tensors[static_cast<size_t>(i)].name.find(".lora_") != std::string::npos) {
                    sel.tensor_ids.push_back(i);
                }
            }
            break;
        }
    }
    sel.mask.assign(p.tensors.size(), 0);
    for (int id : sel.tensor_ids) {
        sel.mask[static_cast<size_t>(id)] = 1;
    }
    return sel;
}

struct HiddenStates {
    int n_layers = 0;
    int seq_len = 0;
    int d_model = 0;
    std::vector<std::vector<double>> layers;  // layers[l] = seq_len x d_model, post-block residual stream
};

// Activation cache for one sequence; retained only when a backward pass will
// follow.
struct ForwardCache {
    int T = 0;
    std::vector<int> tokens;
    std::vector<std::vector<double>> resid;      // n_layers+1 slabs of T x d; resid[0] = embeddings
    std::vector<std::vector<double>> resid_mid;  // per layer, T x d (after attention residual add)
    std::vector<std::vector<double>> ln1_out, ln1_xhat, ln2_out, ln2_xhat;
    std::vector<std::vector<double>> ln1_rstd, ln2_rstd;  // per layer, T
    std::vector<std::vector<double>> q, k, v, mix;        // per layer, T x d
    std::vector<std::vector<double>> att;                 // per layer, H x T x T softmax rows
    std::vector<std::vector<double>> ffn_pre;             // per layer, T x d_ff
    std::vector<std::vector<double>> lora_ax;             // per layer x 4 projections, T x rank (when adapters present)
    std::vector<double> lnf_out, lnf_xhat, lnf_rstd;
};

namespace detail {

struct LinearRef {
    const Tensor* w = nullptr;
    const Tensor* lora_a = nullptr;
    const Tensor* lora_b = nullptr;
    double lora_scale = 0.0;
};

inline LinearRef linear_ref(const Parameters& p, const std::string& name) {
    LinearRef ref;
    ref.w = &p.at(name);
    if (p.lora) {
        auto it = p.index.find(name + ".lora_a");
        if (it != p.index.end()) {
            ref.lora_a = &p.tensors[static_cast<size_t>(it->second)];
            ref.lora_b = &p.at(name + ".lora_b");
            ref.lora_scale = p.lora->alpha / p.lora->rank;
        }
    }
    return ref;
}

// Y = X W^T (+ scale * (X A^T) B^T). Optionally records X A^T for backward.
inline void linear_forward(const LinearRef& ref, const double* X, double* Y, int M, int K, int N,
                           std::vector<double>* ax_cache) {
    nn::matmul_xwt(X, ref.w->data(), Y, M, K, N);
    if (ref.lora_a) {
        const int r = ref.lora_a->rows;
        std::vector<double> local_ax;
        std::vector<double>& ax = ax_cache ? *ax_cache : local_ax;
        ax.assign(static_cast<size_t>(M) * r, 0.0);
        nn::matmul_xwt(X, ref.lora_a->data(), ax.data(), M, K, r);
        std::vector<double> delta(static_cast<size_t>(M) * N);
        nn::matmul_xwt(ax.data(), ref.lora_b->data(), delta.data(), M, r, N);
        const double s = ref.lora_scale;
        for (size_t i = 0; i < delta.size(); ++i) {
            Y[i] += s * delta[i];
        }
    }
}

}  // namespace detail

struct ForwardOutput {
    int T = 0;
    std::vector<int> logit_positions;
    std::vector<double> logits;  // one row of vocab_size per requested position
    HiddenStates hidden;
};

/// Causal forward pass. Emits logits at `logit_positions` (all positions when
/// empty span semantics are not wanted, pass explicitly). Fills `cache` when a
/// backward pass will follow and `hidden_out` when the per-layer residual
/// streams are wanted.
inline ForwardOutput forward_at(const Parameters& p, std::span<const int> tokens,
                                std::span<const int> logit_positions, ForwardCache* cache = nullptr,
                                bool want_hidden = false) {
    const ModelConfig& cfg = p.config;
    const int T = static_cast<int>(tokens.size());
    if (T < 1) {
        throw std::invalid_argument("forward: empty token sequence");
    }
    if (T > cfg.max_seq_len) {
        throw std::length_error("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw std::invalid_argument("forward: token id out of range");
        }
    }
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const int dff = cfg.d_ff;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.T = T;
    c.tokens.assign(tokens.begin(), tokens.end());
    const size_t td = static_cast<size_t>(T) * d;
    c.resid.assign(static_cast<size_t>(cfg.n_layers) + 1, std::vector<double>(td));
    c.resid_mid.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.ln1_out.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.ln1_xhat.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.ln2_out.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.ln2_xhat.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.ln1_rstd.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(static_cast<size_t>(T)));
    c.ln2_rstd.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(static_cast<size_t>(T)));
    c.q.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.k.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.v.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.mix.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(td));
    c.att.assign(static_cast<size_t>(cfg.n_layers),
                 std::vector<double>(static_cast<size_t>(H) * T * T, 0.0));
    c.ffn_pre.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(static_cast<size_t>(T) * dff));
    c.lora_ax.assign(static_cast<size_t>(cfg.n_layers) * 4, {});

    const Tensor& tok_emb = p.at("tok_emb");
    const Tensor& pos_emb = p.at("pos_emb");
    for (int t = 0; t < T; ++t) {
        const double* te = tok_emb.data() + static_cast<size_t>(tokens[static_cast<size_t>(t)]) * d;
        const double* pe = pos_emb.data() + static_cast<size_t>(t) * d;
        double* out = c.resid[0].data() + static_cast<size_t>(t) * d;
        for (int j = 0; j < d; ++j) {
            out[j] = te[j] + pe[j];
        }
    }

    std::vector<double> branch(td);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const size_t ls = static_cast<size_t>(l);
        const Tensor& g1 = p.at(detail::blk(l, "ln1.g"));
        const Tensor& b1 = p.at(detail::blk(l, "ln1.b"));
        for (int t = 0; t < T; ++t) {
            nn::layer_norm_row(c.resid[ls].data() + static_cast<size_t>(t) * d, g1.data(), b1.data(), cfg.ln_epsilon,
                               d, c.ln1_out[ls].data() + static_cast<size_t>(t) * d,
                               c.ln1_xhat[ls].data() + static_cast<size_t>(t) * d, &c.ln1_rstd[ls][static_cast<size_t>(t)]);
        }

        auto wq = detail::linear_ref(p, detail::blk(l, "attn.wq"));
        auto wk = detail::linear_ref(p, detail::blk(l, "attn.wk"));
        auto wv = detail::linear_ref(p, detail::blk(l, "attn.wv"));
        auto wo = detail::linear_ref(p, detail::blk(l, "attn.wo"));
        detail::linear_forward(wq, c.ln1_out[ls].data(), c.q[ls].data(), T, d, d, &c.lora_ax[ls * 4 + 0]);
        detail::linear_forward(wk, c.ln1_out[ls].data(), c.k[ls].data(), T, d, d, &c.lora_ax[ls * 4 + 1]);
        detail::linear_forward(wv, c.ln1_out[ls].data(), c.v[ls].data(), T, d, d, &c.lora_ax[ls * 4 + 2]);

        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            double* att_h = c.att[ls].data() + static_cast<size_t>(h) * T * T;
            for (int pq = 0; pq < T; ++pq) {
                const double* qrow = c.q[ls].data() + static_cast<size_t>(pq) * d + off;
                double* arow = att_h + static_cast<size_t>(pq) * T;
                for (int t = 0; t <= pq; ++t) {
                    const double* krow = c.k[ls].data() + static_cast<size_t>(t) * d + off;
                    double acc = 0.0;
                    for (int j = 0; j < dh; ++j) {
                        acc += qrow[j] * krow[j];
                    }
                    arow[t] = acc * inv_sqrt_dh;
                }
                nn::softmax_in_place(arow, pq + 1);
                double* mrow = c.mix[ls].data() + static_cast<size_t>(pq) * d + off;
                std::memset(mrow, 0, sizeof(double) * static_cast<size_t>(dh));
                for (int t = 0; t <= pq; ++t) {
                    const double* vrow = c.v[ls].data() + static_cast<size_t>(t) * d + off;
                    double a = arow[t];
                    for (int j = 0; j < dh; ++j) {
                        mrow[j] += a * vrow[j];
                    }
                }
            }
        }

        detail::linear_forward(wo, c.mix[ls].data(), branch.data(), T, d, d, &c.lora_ax[ls * 4 + 3]);
        for (size_t i = 0; i < td; ++i) {
            c.resid_mid[ls][i] = c.resid[ls][i] + branch[i];
        }

        const Tensor& g2 = p.at(detail::blk(l, "ln2.g"));
        const Tensor& b2 = p.at(detail::blk(l, "ln2.b"));
        for (int t = 0; t < T; ++t) {
            nn::layer_norm_row(c.resid_mid[ls].data() + static_cast<size_t>(t) * d, g2.data(), b2.data(),
                               cfg.ln_epsilon, d, c.ln2_out[ls].data() + static_cast<size_t>(t) * d,
                               c.ln2_xhat[ls].data() + static_cast<size_t>(t) * d, &c.ln2_rstd[ls][static_cast<size_t>(t)]);
        }

        const Tensor& w1 = p.at(detail::blk(l, "ffn.w1"));
        const Tensor& w2 = p.at(detail::blk(l, "ffn.w2"));
        nn::matmul_xwt(c.ln2_out[ls].data(), w1.data(), c.ffn_pre[ls].data(), T, d, dff);
        std::vector<double> act(static_cast<size_t>(T) * dff);
        for (size_t i = 0; i < act.size(); ++i) {
            act[i] = nn::gelu(c.ffn_pre[ls][i]);
        }
        nn::matmul_xwt(act.data(), w2.data(), branch.data(), T, dff, d);
        for (size_t i = 0; i < td; ++i) {
            c.resid[ls + 1][i] = c.resid_mid[ls][i] + branch[i];
        }
    }

    const Tensor& gf = p.at("ln_f.g");
    const Tensor& bf = p.at("ln_f.b");
    c.lnf_out.assign(td, 0.0);
    c.lnf_xhat.assign(td, 0.0);
    c.lnf_rstd.assign(static_cast<size_t>(T), 0.0);
    for (int t = 0; t < T; ++t) {
        nn::layer_norm_row(c.resid.back().data() + static_cast<size_t>(t) * d, gf.data(), bf.data(), cfg.ln_epsilon, d,
                           c.lnf_out.data() + static_cast<size_t>(t) * d, c.lnf_xhat.data() + static_cast<size_t>(t) * d,
                           &c.lnf_rstd[static_cast<size_t>(t)]);
    }

    ForwardOutput out;
    out.T = T;
    out.logit_positions.assign(logit_positions.begin(), logit_positions.end());
    const Tensor& wu = p.at("w_u");
    out.logits.resize(out.logit_positions.size() * static_cast<size_t>(cfg.vocab_size));
    for (size_t r = 0; r < out.logit_positions.size(); ++r) {
        int pos = out.logit_positions[r];
        if (pos < 0 || pos >= T) {
            throw std::invalid_argument("forward: logit position out of range");
        }
        nn::matmul_xwt(c.lnf_out.data() + static_cast<size_t>(pos) * d, wu.data(),
                       out.logits.data() + r * static_cast<size_t>(cfg.vocab_size), 1, d, cfg.vocab_size);
    }

    if (want_hidden) {
        out.hidden.n_layers = cfg.n_layers;
        out.hidden.seq_len = T;
        out.hidden.d_model = d;
        out.hidden.layers.assign(c.resid.begin() + 1, c.resid.end());
    }
    return out;
}

/// Logits for every position plus the per-layer hidden states.
inline ForwardOutput forward(const Parameters& p, std::span<const int> tokens) {
    std::vector<int> all(tokens.size());
    for (size_t i = 0; i < all.size(); ++i) {
        all[i] = static_cast<int>(i);
    }
    return forward_at(p, tokens, all, nullptr, true);
}

/// Softmax of the final-position logits.
inline std::vector<double> next_token_distribution(const Parameters& p, std::span<const int> tokens) {
    const int last = static_cast<int>(tokens.size()) - 1;
    auto out = forward_at(p, tokens, std::span<const int>(&last, 1), nullptr, false);
    std::vector<double> probs(out.logits.begin(), out.logits.end());
    nn::softmax_in_place(probs.data(), p.config.vocab_size);
    return probs;
}

/// Per-tensor gradient accumulator aligned with Parameters::tensors. Buffers
/// exist only for tensors whose gradients are needed.
struct GradBuffer {
    std::vector<std::vector<double>> g;
    std::vector<char> need;

    void init(const Parameters& p, const std::vector<char>& need_mask) {
        need = need_mask;
        g.assign(p.tensors.size(), {});
        for (size_t i = 0; i < p.tensors.size(); ++i) {
            if (need[i]) {
                g[i].assign(p.tensors[i].size(), 0.0);
            }
        }
    }

    void add_from(const GradBuffer& other) {
        for (size_t i = 0; i < g.size(); ++i) {
            if (!g[i].empty() && !other.g[i].empty()) {
                const auto& src = other.g[i];
                auto& dst = g[i];
                for (size_t j = 0; j < dst.size(); ++j) {
                    dst[j] += src[j];
                }
            }
        }
    }

    double* at(int id) { return g[static_cast<size_t>(id)].data(); }
    bool has(int id) const { return !g[static_cast<size_t>(id)].empty(); }
};

namespace detail {

struct LinearGradRefs {
    int w_id = -1, a_id = -1, b_id = -1;
};

inline LinearGradRefs linear_grad_refs(const Parameters& p, const std::string& name) {
    LinearGradRefs r;
    r.w_id = p.idx(name);
    auto it = p.index.find(name + ".lora_a");
    if (it != p.index.end()) {
        r.a_id = it->second;
        r.b_id = p.idx(name + ".lora_b");
    }
    return r;
}

// Backward through Y = X W^T (+ scale (X A^T) B^T); accumulates dX always and
// parameter grads only where the buffer asks for them.
inline void linear_backward(const Parameters& p, const std::string& name, const double* X, const double* dY,
                            const std::vector<double>& ax, double* dX, GradBuffer& gb, int M, int K, int N) {
    auto refs = linear_grad_refs(p, name);
    const Tensor& w = p.tensors[static_cast<size_t>(refs.w_id)];
    nn::matmul_acc_dxw(dY, w.data(), dX, M, N, K);
    if (gb.has(refs.w_id)) {
        nn::matmul_acc_dw(dY, X, gb.at(refs.w_id), M, N, K);
    }
    if (refs.a_id >= 0) {
        const Tensor& A = p.tensors[static_cast<size_t>(refs.a_id)];
        const Tensor& B = p.tensors[static_cast<size_t>(refs.b_id)];
        const int r = A.rows;
        const double s = p.lora->alpha / p.lora->rank;
        // d_ax = s * dY B ; dB += s * dY^T ax ; dA += d_ax^T X ; dX += d_ax A
        std::vector<double> d_ax(static_cast<size_t>(M) * r, 0.0);
        nn::matmul_acc_dxw(dY, B.data(), d_ax.data(), M, N, r);
        for (auto& x : d_ax) {
            x *= s;
        }
        if (gb.has(refs.b_id)) {
            std::vector<double> scaled_dy(static_cast<size_t>(M) * N);
            for (size_t i = 0; i < scaled_dy.size(); ++i) {
                scaled_dy[i] = s * dY[i];
            }
            nn::matmul_acc_dw(scaled_dy.data(), ax.data(), gb.at(refs.b_id), M, N, r);
        }
        if (gb.has(refs.a_id)) {
            nn::matmul_acc_dw(d_ax.data(), X, gb.at(refs.a_id), M, r, K);
        }
        nn::matmul_acc_dxw(d_ax.data(), A.data(), dX, M, r, K);
    }
}

}  // namespace detail

/// Backward pass for rows of supervised logits. `dlogits` has one row per
/// entry of `positions`. When `blocks_frozen` is set (last-layer tuning) the
/// pass stops after the final layer norm.
inline void backward_at(const Parameters& p, const ForwardCache& c, std::span<const int> positions,
                        const std::vector<double>& dlogits, GradBuffer& gb, bool blocks_frozen = false) {
    const ModelConfig& cfg = p.config;
    const int T = c.T;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const int dff = cfg.d_ff;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const size_t td = static_cast<size_t>(T) * d;

    const Tensor& wu = p.at("w_u");
    const int wu_id = p.idx("w_u");

    std::vector<double> d_lnf(td, 0.0);
    for (size_t r = 0; r < positions.size(); ++r) {
        const double* dl = dlogits.data() + r * static_cast<size_t>(cfg.vocab_size);
        const int pos = positions[r];
        nn::matmul_acc_dxw(dl, wu.data(), d_lnf.data() + static_cast<size_t>(pos) * d, 1, cfg.vocab_size, d);
        if (gb.has(wu_id)) {
            nn::matmul_acc_dw(dl, c.lnf_out.data() + static_cast<size_t>(pos) * d, gb.at(wu_id), 1, cfg.vocab_size, d);
        }
    }

    const int gf_id = p.idx("ln_f.g");
    const int bf_id = p.idx("ln_f.b");
    const Tensor& gf = p.at("ln_f.g");
    std::vector<double> d_resid(td, 0.0);
    for (int t = 0; t < T; ++t) {
        nn::layer_norm_backward_row(d_lnf.data() + static_cast<size_t>(t) * d,
                                    c.lnf_xhat.data() + static_cast<size_t>(t) * d, c.lnf_rstd[static_cast<size_t>(t)],
                                    gf.data(), d, d_resid.data() + static_cast<size_t>(t) * d,
                                    gb.has(gf_id) ? gb.at(gf_id) : nullptr, gb.has(bf_id) ? gb.at(bf_id) : nullptr);
    }
    if (blocks_frozen) {
        return;
    }

    std::vector<double> d_branch(td), d_ln_out(td), d_mix(td), d_q(td), d_k(td), d_v(td);
    std::vector<double> d_act(static_cast<size_t>(T) * dff), d_pre(static_cast<size_t>(T) * dff);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const size_t ls = static_cast<size_t>(l);

        // FFN branch: resid[l+1] = resid_mid + W2 gelu(W1 ln2(resid_mid))
        std::fill(d_ln_out.begin(), d_ln_out.end(), 0.0);
        std::fill(d_act.begin(), d_act.end(), 0.0);
        const Tensor& w2 = p.at(detail::blk(l, "ffn.w2"));
        const int w2_id = p.idx(detail::blk(l, "ffn.w2"));
        const int w1_id = p.idx(detail::blk(l, "ffn.w1"));
        nn::matmul_acc_dxw(d_resid.data(), w2.data(), d_act.data(), T, d, dff);
        if (gb.has(w2_id)) {
            std::vector<double> act(static_cast<size_t>(T) * dff);
            for (size_t i = 0; i < act.size(); ++i) {
                act[i] = nn::gelu(c.ffn_pre[ls][i]);
            }
            nn::matmul_acc_dw(d_resid.data(), act.data(), gb.at(w2_id), T, d, dff);
        }
        for (size_t i = 0; i < d_pre.size(); ++i) {
            d_pre[i] = d_act[i] * nn::gelu_grad(c.ffn_pre[ls][i]);
        }
        const Tensor& w1 = p.at(detail::blk(l, "ffn.w1"));
        nn::matmul_acc_dxw(d_pre.data(), w1.data(), d_ln_out.data(), T, dff, d);
        if (gb.has(w1_id)) {
            nn::matmul_acc_dw(d_pre.data(), c.ln2_out[ls].data(), gb.at(w1_id), T, dff, d);
        }

        // d_resid currently holds the gradient at resid[l+1]; fold the LN2
        // path into it to obtain the gradient at resid_mid.
        const int g2_id = p.idx(detail::blk(l, "ln2.g"));
        const int b2_id = p.idx(detail::blk(l, "ln2.b"));
        const Tensor& g2 = p.at(detail::blk(l, "ln2.g"));
        for (int t = 0; t < T; ++t) {
            nn::layer_norm_backward_row(d_ln_out.data() + static_cast<size_t>(t) * d,
                                        c.ln2_xhat[ls].data() + static_cast<size_t>(t) * d,
                                        c.ln2_rstd[ls][static_cast<size_t>(t)], g2.data(), d,
                                        d_resid.data() + static_cast<size_t>(t) * d,
                                        gb.has(g2_id) ? gb.at(g2_id) : nullptr,
                                        gb.has(b2_id) ? gb.at(b2_id) : nullptr);
        }

        // Attention branch: resid_mid = resid[l] + Wo mix(attn)
        std::fill(d_mix.begin(), d_mix.end(), 0.0);
        detail::linear_backward(p, detail::blk(l, "attn.wo"), c.mix[ls].data(), d_resid.data(), c.lora_ax[ls * 4 + 3],
                                d_mix.data(), gb, T, d, d);

        std::fill(d_q.begin(), d_q.end(), 0.0);
        std::fill(d_k.begin(), d_k.end(), 0.0);
        std::fill(d_v.begin(), d_v.end(), 0.0);
        std::vector<double> dprob(static_cast<size_t>(T));
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            const double* att_h = c.att[ls].data() + static_cast<size_t>(h) * T * T;
            for (int pq = T - 1; pq >= 0; --pq) {
                const double* arow = att_h + static_cast<size_t>(pq) * T;
                const double* dmrow = d_mix.data() + static_cast<size_t>(pq) * d + off;
                double s = 0.0;
                for (int t = 0; t <= pq; ++t) {
                    const double* vrow = c.v[ls].data() + static_cast<size_t>(t) * d + off;
                    double acc = 0.0;
                    for (int j = 0; j < dh; ++j) {
                        acc += dmrow[j] * vrow[j];
                    }
                    dprob[static_cast<size_t>(t)] = acc;
                    s += acc * arow[t];
                    double* dvrow = d_v.data() + static_cast<size_t>(t) * d + off;
                    double a = arow[t];
                    for (int j = 0; j < dh; ++j) {
                        dvrow[j] += a * dmrow[j];
                    }
                }
                const double* qrow = c.q[ls].data() + static_cast<size_t>(pq) * d + off;
                double* dqrow = d_q.data() + static_cast<size_t>(pq) * d + off;
                for (int t = 0; t <= pq; ++t) {
                    double ds = arow[t] * (dprob[static_cast<size_t>(t)] - s) * inv_sqrt_dh;
                    const double* krow = c.k[ls].data() + static_cast<size_t>(t) * d + off;
                    double* dkrow = d_k.data() + static_cast<size_t>(t) * d + off;
                    for (int j = 0; j < dh; ++j) {
                        dqrow[j] += ds * krow[j];
                        dkrow[j] += ds * qrow[j];
                    }
                }
            }
        }

        std::fill(d_ln_out.begin(), d_ln_out.end(), 0.0);
        detail::linear_backward(p, detail::blk(l, "attn.wq"), c.ln1_out[ls].data(), d_q.data(), c.lora_ax[ls * 4 + 0],
                                d_ln_out.data(), gb, T, d, d);
        detail::linear_backward(p, detail::blk(l, "attn.wk"), c.ln1_out[ls].data(), d_k.data(), c.lora_ax[ls * 4 + 1],
                                d_ln_out.data(), gb, T, d, d);
        detail::linear_backward(p, detail::blk(l, "attn.wv"), c.ln1_out[ls].data(), d_v.data(), c.lora_ax[ls * 4 + 2],
                                d_ln_out.data(), gb, T, d, d);

        const int g1_id = p.idx(detail::blk(l, "ln1.g"));
        const int b1_id = p.idx(detail::blk(l, "ln1.b"));
        const Tensor& g1 = p.at(detail::blk(l, "ln1.g"));
        for (int t = 0; t < T; ++t) {
            nn::layer_norm_backward_row(d_ln_out.data() + static_cast<size_t>(t) * d,
                                        c.ln1_xhat[ls].data() + static_cast<size_t>(t) * d,
                                        c.ln1_rstd[ls][static_cast<size_t>(t)], g1.data(), d,
                                        d_resid.data() + static_cast<size_t>(t) * d,
                                        gb.has(g1_id) ? gb.at(g1_id) : nullptr,
                                        gb.has(b1_id) ? gb.at(b1_id) : nullptr);
        }
    }

    const int tok_id = p.idx("tok_emb");
    const int pos_id = p.idx("pos_emb");
    if (gb.has(tok_id)) {
        double* dte = gb.at(tok_id);
        for (int t = 0; t < T; ++t) {
            double* row = dte + static_cast<size_t>(c.tokens[static_cast<size_t>(t)]) * d;
            const double* src = d_resid.data() + static_cast<size_t>(t) * d;
            for (int j = 0; j < d; ++j) {
                row[j] += src[j];
            }
        }
    }
    if (gb.has(pos_id)) {
        double* dpe = gb.at(pos_id);
        for (int t = 0; t < T; ++t) {
            double* row = dpe + static_cast<size_t>(t) * d;
            const double* src = d_resid.data() + static_cast<size_t>(t) * d;
            for (int j = 0; j < d; ++j) {
                row[j] += src[j];
            }
        }
    }
}

}  // namespace unlearn
