#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "reft/rng.hpp"

namespace reft {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct LengthError : std::length_error {
    using std::length_error::length_error;
};

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;
    int ctx_len = 64;
    int tap_layer = 2;
    int adapter_rank = 4;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw ConfigError("d_model must be a positive multiple of n_heads");
        if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
        if (vocab_size < 4) throw ConfigError("vocab_size must cover the special tokens");
        if (ctx_len < 2) throw ConfigError("ctx_len must be >= 2");
        if (tap_layer < 1 || tap_layer > n_layers) throw ConfigError("tap_layer must be in [1, n_layers]");
        if (adapter_rank < 1) throw ConfigError("adapter_rank must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Which parameter groups an optimizer step may touch.
enum class TrainableMask { BaseOnly, BaseAndAdapters, AdaptersOnly };

inline bool base_trainable(TrainableMask m) { return m != TrainableMask::AdaptersOnly; }
inline bool adapters_trainable(TrainableMask m) { return m != TrainableMask::BaseOnly; }

template <class T>
struct LayerParams {
    Mat<T> ln1_g, ln1_b;
    Mat<T> wq, wk, wv, wo;
    Mat<T> ln2_g, ln2_b;
    Mat<T> w1, b1, w2, b2;
    // Low-rank adapters: the effective projection is W + A * B.
    Mat<T> aq, bq, ak, bk, av, bv;
};

template <class T>
struct Params {
    Mat<T> tok_emb, pos_emb;
    std::vector<LayerParams<T>> layers;
    Mat<T> lnf_g, lnf_b;
    Mat<T> w_out;
};

/// Calls f(name, is_adapter, tensor...) for every tensor, zipping several
/// parameter sets of identical layout (parameters, gradients, moments, ...).
template <class Fn, class P0, class... Ps>
void visit_tensors(Fn&& f, P0& p0, Ps&... ps) {
    f(std::string("tok_emb"), false, p0.tok_emb, ps.tok_emb...);
    f(std::string("pos_emb"), false, p0.pos_emb, ps.pos_emb...);
    for (std::size_t l = 0; l < p0.layers.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        auto& a = p0.layers[l];
        f(pre + "ln1.g", false, a.ln1_g, ps.layers[l].ln1_g...);
        f(pre + "ln1.b", false, a.ln1_b, ps.layers[l].ln1_b...);
        f(pre + "attn.wq", false, a.wq, ps.layers[l].wq...);
        f(pre + "attn.wk", false, a.wk, ps.layers[l].wk...);
        f(pre + "attn.wv", false, a.wv, ps.layers[l].wv...);
        f(pre + "attn.wo", false, a.wo, ps.layers[l].wo...);
        f(pre + "ln2.g", false, a.ln2_g, ps.layers[l].ln2_g...);
        f(pre + "ln2.b", false, a.ln2_b, ps.layers[l].ln2_b...);
        f(pre + "ffn.w1", false, a.w1, ps.layers[l].w1...);
        f(pre + "ffn.b1", false, a.b1, ps.layers[l].b1...);
        f(pre + "ffn.w2", false, a.w2, ps.layers[l].w2...);
        f(pre + "ffn.b2", false, a.b2, ps.layers[l].b2...);
        f(pre + "lora.aq", true, a.aq, ps.layers[l].aq...);
        f(pre + "lora.bq", true, a.bq, ps.layers[l].bq...);
        f(pre + "lora.ak", true, a.ak, ps.layers[l].ak...);
        f(pre + "lora.bk", true, a.bk, ps.layers[l].bk...);
        f(pre + "lora.av", true, a.av, ps.layers[l].av...);
        f(pre + "lora.bv", true, a.bv, ps.layers[l].bv...);
    }
    f(std::string("lnf.g"), false, p0.lnf_g, ps.lnf_g...);
    f(std::string("lnf.b"), false, p0.lnf_b, ps.lnf_b...);
    f(std::string("w_out"), false, p0.w_out, ps.w_out...);
}

template <class T>
Params<T> zeros_like(const Params<T>& p) {
    Params<T> z = p;
    visit_tensors([](const std::string&, bool, Mat<T>& m) { m.setZero(); }, z);
    return z;
}

template <class T>
std::size_t parameter_count(const Params<T>& p) {
    std::size_t n = 0;
    visit_tensors([&](const std::string&, bool, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); }, p);
    return n;
}

template <class To, class From>
Params<To> cast_params(const Params<From>& p) {
    Params<To> out;
    out.layers.resize(p.layers.size());
    visit_tensors([](const std::string&, bool, const Mat<From>& src, Mat<To>& dst) { dst = src.template cast<To>(); },
                  p, out);
    return out;
}

template <class T>
struct ModelState {
    ModelConfig config;
    Params<T> params;
    TrainableMask mask = TrainableMask::AdaptersOnly;
};

template <class To, class From>
ModelState<To> cast_state(const ModelState<From>& s) {
    return {s.config, cast_params<To>(s.params), s.mask};
}

template <class T>
ModelState<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "init_model"));
    const int d = cfg.d_model, r = cfg.adapter_rank;
    auto normal = [&](int rows, int cols, double stddev) {
        Mat<T> m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
        return m;
    };
    auto constant = [](int rows, int cols, double v) { return Mat<T>::Constant(rows, cols, static_cast<T>(v)); };

    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double resid_std = proj_std / std::sqrt(2.0 * cfg.n_layers);
    ModelState<T> s;
    s.config = cfg;
    auto& p = s.params;
    p.tok_emb = normal(cfg.vocab_size, d, 0.5);
    p.pos_emb = normal(cfg.ctx_len, d, 0.1);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& L : p.layers) {
        L.ln1_g = constant(1, d, 1.0);
        L.ln1_b = constant(1, d, 0.0);
        L.wq = normal(d, d, proj_std);
        L.wk = normal(d, d, proj_std);
        L.wv = normal(d, d, proj_std);
        L.wo = normal(d, d, resid_std);
        L.ln2_g = constant(1, d, 1.0);
        L.ln2_b = constant(1, d, 0.0);
        L.w1 = normal(d, cfg.d_ff, proj_std);
        L.b1 = constant(1, cfg.d_ff, 0.0);
        L.w2 = normal(cfg.d_ff, d, resid_std / 2.0);
        L.b2 = constant(1, d, 0.0);
        L.aq = normal(d, r, proj_std);
        L.ak = normal(d, r, proj_std);
        L.av = normal(d, r, proj_std);
        L.bq = constant(r, d, 0.0);
        L.bk = constant(r, d, 0.0);
        L.bv = constant(r, d, 0.0);
    }
    p.lnf_g = constant(1, d, 1.0);
    p.lnf_b = constant(1, d, 0.0);
    p.w_out = normal(d, cfg.vocab_size, proj_std);
    return s;
}

/// Re-draws A and zeroes B in every adapter, so the adapted model starts out
/// computing exactly what the base model computes.
template <class T>
void reset_adapters(ModelState<T>& s, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "reset_adapters"));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(s.config.d_model));
    for (auto& L : s.params.layers) {
        for (Mat<T>* a : {&L.aq, &L.ak, &L.av}) {
            for (Eigen::Index i = 0; i < a->size(); ++i) a->data()[i] = static_cast<T>(stddev * rng.normal());
        }
        L.bq.setZero();
        L.bk.setZero();
        L.bv.setZero();
    }
}

// ---------------------------------------------------------------------------
// Forward and backward passes over a packed batch of sequences
// ---------------------------------------------------------------------------

template <class T>
struct LayerCache {
    Mat<T> x_in;
    Mat<T> xhat1, n1;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd1;
    Mat<T> n1aq, n1ak, n1av;
    Mat<T> q, k, v;
    std::vector<Mat<T>> probs;  // [seq * n_heads + head], causal softmax
    Mat<T> attn;                // concatenated head outputs, before wo
    Mat<T> h;
    Mat<T> xhat2, n2;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd2;
    Mat<T> u, g;
};

/// Activations of one forward pass. Rows are the tokens of all sequences,
/// concatenated; offsets[i] is the first row of sequence i.
template <class T>
struct ForwardResult {
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> lengths;
    Mat<T> logits;
    std::vector<Mat<T>> hidden;  // hidden[0] = embeddings, hidden[l] = output of block l
    std::vector<LayerCache<T>> layers;
    Mat<T> xhatf, nf;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstdf;
    std::vector<int> tokens;
};

namespace detail {

template <class T>
constexpr T ln_eps() {
    return static_cast<T>(1e-5);
}

template <class T>
void layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& xhat,
                Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd, Mat<T>& y) {
    const Eigen::Index n = x.rows(), d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mu = x.row(i).mean();
        const T var = (x.row(i).array() - mu).square().mean();
        rstd(i) = T(1) / std::sqrt(var + ln_eps<T>());
        xhat.row(i) = (x.row(i).array() - mu) * rstd(i);
    }
    y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd,
                           const Mat<T>& g, Mat<T>* dg, Mat<T>* db) {
    if (dg) dg->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    if (db) db->row(0) += dy.colwise().sum();
    Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const T m1 = dxhat.row(i).mean();
        const T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
        dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
    }
    return dx;
}

template <class T>
T gelu(T u) {
    constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = static_cast<T>(0.044715);
    return T(0.5) * u * (T(1) + std::tanh(c * (u + k * u * u * u)));
}

template <class T>
T gelu_grad(T u) {
    constexpr T c = static_cast<T>(0.7978845608028654);
    constexpr T k = static_cast<T>(0.044715);
    const T t = std::tanh(c * (u + k * u * u * u));
    return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3) * k * u * u);
}

}  // namespace detail

/// Runs the model over a batch of token sequences. With keep_cache the result
/// carries everything backward() needs.
template <class T>
ForwardResult<T> forward_batch(const ModelState<T>& state, const std::vector<const std::vector<int>*>& seqs,
                               bool keep_cache = false, bool use_adapters = true) {
    const auto& cfg = state.config;
    const auto& p = state.params;
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    ForwardResult<T> out;
    std::size_t n = 0;
    for (const auto* s : seqs) {
        if (s->empty()) throw std::invalid_argument("empty token sequence");
        if (s->size() > static_cast<std::size_t>(cfg.ctx_len))
            throw LengthError("sequence of length " + std::to_string(s->size()) + " exceeds ctx_len " +
                              std::to_string(cfg.ctx_len));
        out.offsets.push_back(n);
        out.lengths.push_back(s->size());
        n += s->size();
    }
    const auto N = static_cast<Eigen::Index>(n);

    Mat<T> x(N, d);
    out.tokens.reserve(n);
    for (std::size_t si = 0; si < seqs.size(); ++si) {
        for (std::size_t t = 0; t < seqs[si]->size(); ++t) {
            const int tok = (*seqs[si])[t];
            if (tok < 0 || tok >= cfg.vocab_size) throw std::out_of_range("token id out of range");
            out.tokens.push_back(tok);
            x.row(static_cast<Eigen::Index>(out.offsets[si] + t)) =
                p.tok_emb.row(tok) + p.pos_emb.row(static_cast<Eigen::Index>(t));
        }
    }
    out.hidden.reserve(static_cast<std::size_t>(cfg.n_layers) + 1);
    out.hidden.push_back(x);
    if (keep_cache) out.layers.resize(static_cast<std::size_t>(cfg.n_layers));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& L = p.layers[static_cast<std::size_t>(l)];
        LayerCache<T> local;
        LayerCache<T>& c = keep_cache ? out.layers[static_cast<std::size_t>(l)] : local;
        if (keep_cache) c.x_in = x;

        detail::layer_norm(x, L.ln1_g, L.ln1_b, c.xhat1, c.rstd1, c.n1);
        c.q.noalias() = c.n1 * L.wq;
        c.k.noalias() = c.n1 * L.wk;
        c.v.noalias() = c.n1 * L.wv;
        if (use_adapters) {
            c.n1aq.noalias() = c.n1 * L.aq;
            c.n1ak.noalias() = c.n1 * L.ak;
            c.n1av.noalias() = c.n1 * L.av;
            c.q.noalias() += c.n1aq * L.bq;
            c.k.noalias() += c.n1ak * L.bk;
            c.v.noalias() += c.n1av * L.bv;
        }

        c.attn.resize(N, d);
        if (keep_cache) c.probs.resize(seqs.size() * static_cast<std::size_t>(H));
        for (std::size_t si = 0; si < seqs.size(); ++si) {
            const auto o = static_cast<Eigen::Index>(out.offsets[si]);
            const auto Tn = static_cast<Eigen::Index>(out.lengths[si]);
            for (int h = 0; h < H; ++h) {
                Mat<T> s;
                s.noalias() = c.q.block(o, h * dh, Tn, dh) * c.k.block(o, h * dh, Tn, dh).transpose();
                for (Eigen::Index i = 0; i < Tn; ++i) {
                    const T mx = (s.row(i).head(i + 1) * scale).maxCoeff();
                    T sum = 0;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        const T e = std::exp(s(i, j) * scale - mx);
                        s(i, j) = e;
                        sum += e;
                    }
                    s.row(i).head(i + 1) /= sum;
                    s.row(i).tail(Tn - i - 1).setZero();
                }
                c.attn.block(o, h * dh, Tn, dh).noalias() = s * c.v.block(o, h * dh, Tn, dh);
                if (keep_cache) c.probs[si * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)] = std::move(s);
            }
        }
        c.h = x;
        c.h.noalias() += c.attn * L.wo;

        detail::layer_norm(c.h, L.ln2_g, L.ln2_b, c.xhat2, c.rstd2, c.n2);
        c.u.noalias() = c.n2 * L.w1;
        c.u.rowwise() += L.b1.row(0);
        c.g = c.u.unaryExpr([](T v) { return detail::gelu(v); });
        x = c.h;
        x.noalias() += c.g * L.w2;
        x.rowwise() += L.b2.row(0);
        out.hidden.push_back(x);
    }

    Eigen::Matrix<T, Eigen::Dynamic, 1> rstdf;
    Mat<T> xhatf, nf;
    detail::layer_norm(x, p.lnf_g, p.lnf_b, xhatf, rstdf, nf);
    out.logits.noalias() = nf * p.w_out;
    if (keep_cache) {
        out.xhatf = std::move(xhatf);
        out.nf = std::move(nf);
        out.rstdf = std::move(rstdf);
    }
    return out;
}

/// Single-sequence forward returning per-position logits and per-layer hidden states.
template <class T>
ForwardResult<T> forward(const ModelState<T>& state, const std::vector<int>& tokens, bool use_adapters = true) {
    return forward_batch(state, {&tokens}, false, use_adapters);
}

/// Gradients of a scalar loss given its derivative w.r.t. the logits and,
/// optionally, w.r.t. hidden states (d_hidden[l] may be empty for untouched layers).
/// Only tensors trainable under the state's mask receive gradient.
template <class T>
Params<T> backward(const ModelState<T>& state, const ForwardResult<T>& fw, const Mat<T>& d_logits,
                   const std::vector<Mat<T>>& d_hidden = {}) {
    if (fw.layers.empty()) throw std::logic_error("backward requires a forward pass run with keep_cache");
    const auto& cfg = state.config;
    const auto& p = state.params;
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const bool base = base_trainable(state.mask);
    const bool adapt = adapters_trainable(state.mask);

    Params<T> gr = zeros_like(p);

    if (base) gr.w_out.noalias() = fw.nf.transpose() * d_logits;
    Mat<T> dnf;
    dnf.noalias() = d_logits * p.w_out.transpose();
    Mat<T> dx = detail::layer_norm_backward<T>(dnf, fw.xhatf, fw.rstdf, p.lnf_g, base ? &gr.lnf_g : nullptr,
                                               base ? &gr.lnf_b : nullptr);

    auto inject = [&](int layer) {
        const auto li = static_cast<std::size_t>(layer);
        if (li < d_hidden.size() && d_hidden[li].size() > 0) dx += d_hidden[li];
    };

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        inject(l + 1);
        const auto& L = p.layers[static_cast<std::size_t>(l)];
        const auto& c = fw.layers[static_cast<std::size_t>(l)];
        auto& G = gr.layers[static_cast<std::size_t>(l)];

        // Feed-forward block.
        Mat<T> dg;
        dg.noalias() = dx * L.w2.transpose();
        if (base) {
            G.w2.noalias() = c.g.transpose() * dx;
            G.b2.row(0) = dx.colwise().sum();
        }
        Mat<T> du = dg.array() * c.u.unaryExpr([](T v) { return detail::gelu_grad(v); }).array();
        if (base) {
            G.w1.noalias() = c.n2.transpose() * du;
            G.b1.row(0) = du.colwise().sum();
        }
        Mat<T> dn2;
        dn2.noalias() = du * L.w1.transpose();
        Mat<T> dh_res = dx + detail::layer_norm_backward<T>(dn2, c.xhat2, c.rstd2, L.ln2_g, base ? &G.ln2_g : nullptr,
                                                            base ? &G.ln2_b : nullptr);

        // Attention block.
        if (base) G.wo.noalias() = c.attn.transpose() * dh_res;
        Mat<T> dattn;
        dattn.noalias() = dh_res * L.wo.transpose();
        Mat<T> dq = Mat<T>::Zero(dattn.rows(), d), dk = Mat<T>::Zero(dattn.rows(), d), dv = Mat<T>::Zero(dattn.rows(), d);
        for (std::size_t si = 0; si < fw.offsets.size(); ++si) {
            const auto o = static_cast<Eigen::Index>(fw.offsets[si]);
            const auto Tn = static_cast<Eigen::Index>(fw.lengths[si]);
            for (int h = 0; h < H; ++h) {
                const Mat<T>& P = c.probs[si * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
                const auto dO = dattn.block(o, h * dh, Tn, dh);
                Mat<T> dP;
                dP.noalias() = dO * c.v.block(o, h * dh, Tn, dh).transpose();
                dv.block(o, h * dh, Tn, dh).noalias() = P.transpose() * dO;
                Mat<T> dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
                dS *= scale;
                dq.block(o, h * dh, Tn, dh).noalias() = dS * c.k.block(o, h * dh, Tn, dh);
                dk.block(o, h * dh, Tn, dh).noalias() = dS.transpose() * c.q.block(o, h * dh, Tn, dh);
            }
        }

        Mat<T> dn1 = Mat<T>::Zero(dattn.rows(), d);
        auto project_back = [&](const Mat<T>& dy, const Mat<T>& W, const Mat<T>& A, const Mat<T>& B, const Mat<T>& n1a,
                                Mat<T>& gW, Mat<T>& gA, Mat<T>& gB) {
            if (base) gW.noalias() = c.n1.transpose() * dy;
            Mat<T> dyb;
            dyb.noalias() = dy * B.transpose();
            if (adapt) {
                gB.noalias() = n1a.transpose() * dy;
                gA.noalias() = c.n1.transpose() * dyb;
            }
            dn1.noalias() += dy * W.transpose();
            dn1.noalias() += dyb * A.transpose();
        };
        project_back(dq, L.wq, L.aq, L.bq, c.n1aq, G.wq, G.aq, G.bq);
        project_back(dk, L.wk, L.ak, L.bk, c.n1ak, G.wk, G.ak, G.bk);
        project_back(dv, L.wv, L.av, L.bv, c.n1av, G.wv, G.av, G.bv);

        dx = dh_res + detail::layer_norm_backward<T>(dn1, c.xhat1, c.rstd1, L.ln1_g, base ? &G.ln1_g : nullptr,
                                                     base ? &G.ln1_b : nullptr);
    }
    inject(0);

    if (base) {
        for (std::size_t si = 0; si < fw.offsets.size(); ++si) {
            for (std::size_t t = 0; t < fw.lengths[si]; ++t) {
                const auto row = static_cast<Eigen::Index>(fw.offsets[si] + t);
                gr.tok_emb.row(fw.tokens[static_cast<std::size_t>(row)]) += dx.row(row);
                gr.pos_emb.row(static_cast<Eigen::Index>(t)) += dx.row(row);
            }
        }
    }
    return gr;
}

}  // namespace reft
