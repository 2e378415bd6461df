#ifndef MIXMATCH_NN_HPP
#define MIXMATCH_NN_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixmatch/common.hpp"
#include "mixmatch/matrix.hpp"
#include "mixmatch/rng.hpp"

namespace mixmatch {

struct ModelConfig {
    int vocab_size = 0;
    int max_seq_len = 0;
    int embed_dim = 0;
    int num_layers = 0;
    int num_heads = 0;
    int hidden_dim = 0;
    int num_classes = 0;
    float dropout_rate = 0.0f;
    SpecialTokens specials;

    bool operator==(const ModelConfig&) const = default;

    void validate() const {
        if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
        if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be >= 2");
        if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0)
            throw std::invalid_argument("embed_dim must be divisible by num_heads");
        if (num_layers < 0) throw std::invalid_argument("num_layers must be >= 0");
        if (hidden_dim < 1) throw std::invalid_argument("hidden_dim must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
        if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f))
            throw std::invalid_argument("dropout_rate must be in [0, 1)");
    }
};

// Post-layer-norm encoder block weights.
template <typename T>
struct LayerWeights {
    Matrix<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix<T> ln1_g, ln1_b;
    Matrix<T> w1, b1;  // embed_dim x hidden_dim
    Matrix<T> w2, b2;  // hidden_dim x embed_dim
    Matrix<T> ln2_g, ln2_b;
};

template <typename T>
struct Encoder {
    Matrix<T> tok_emb;  // vocab_size x embed_dim
    Matrix<T> pos_emb;  // max_seq_len x embed_dim
    Matrix<T> emb_ln_g, emb_ln_b;
    std::vector<LayerWeights<T>> layers;
};

template <typename T>
struct GenHead {
    Matrix<T> w;  // embed_dim x vocab_size
    Matrix<T> b;  // 1 x vocab_size
};

template <typename T>
struct ClsHead {
    Matrix<T> pool_w;  // embed_dim x embed_dim, tanh pooling over position 0
    Matrix<T> pool_b;
    Matrix<T> out_w;  // embed_dim x num_classes
    Matrix<T> out_b;
};

// ---------------------------------------------------------------------------
// Parameter visitation. Declared order is the serialization order and the
// RNG draw order at init, so it must stay stable.
// ---------------------------------------------------------------------------

// fn(name, Matrix&, apply_weight_decay)
template <typename E, typename Fn>
void visit_encoder(E& e, Fn&& fn) {
    fn("encoder.tok_emb", e.tok_emb, true);
    fn("encoder.pos_emb", e.pos_emb, true);
    fn("encoder.emb_ln_g", e.emb_ln_g, false);
    fn("encoder.emb_ln_b", e.emb_ln_b, false);
    for (std::size_t l = 0; l < e.layers.size(); ++l) {
        auto& ly = e.layers[l];
        const std::string p = "encoder.layer" + std::to_string(l) + ".";
        fn(p + "wq", ly.wq, true);
        fn(p + "bq", ly.bq, false);
        fn(p + "wk", ly.wk, true);
        fn(p + "bk", ly.bk, false);
        fn(p + "wv", ly.wv, true);
        fn(p + "bv", ly.bv, false);
        fn(p + "wo", ly.wo, true);
        fn(p + "bo", ly.bo, false);
        fn(p + "ln1_g", ly.ln1_g, false);
        fn(p + "ln1_b", ly.ln1_b, false);
        fn(p + "w1", ly.w1, true);
        fn(p + "b1", ly.b1, false);
        fn(p + "w2", ly.w2, true);
        fn(p + "b2", ly.b2, false);
        fn(p + "ln2_g", ly.ln2_g, false);
        fn(p + "ln2_b", ly.ln2_b, false);
    }
}

template <typename G, typename Fn>
void visit_gen_head(G& g, Fn&& fn) {
    fn("gen.w", g.w, true);
    fn("gen.b", g.b, false);
}

template <typename C, typename Fn>
void visit_cls_head(C& c, Fn&& fn) {
    fn("cls.pool_w", c.pool_w, true);
    fn("cls.pool_b", c.pool_b, false);
    fn("cls.out_w", c.out_w, true);
    fn("cls.out_b", c.out_b, false);
}

// ---------------------------------------------------------------------------
// Allocation, init, conversion
// ---------------------------------------------------------------------------

template <typename T>
Encoder<T> make_encoder(const ModelConfig& cfg) {
    Encoder<T> e;
    e.tok_emb = Matrix<T>(cfg.vocab_size, cfg.embed_dim);
    e.pos_emb = Matrix<T>(cfg.max_seq_len, cfg.embed_dim);
    e.emb_ln_g = Matrix<T>(1, cfg.embed_dim);
    e.emb_ln_b = Matrix<T>(1, cfg.embed_dim);
    e.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& ly : e.layers) {
        ly.wq = ly.wk = ly.wv = ly.wo = Matrix<T>(cfg.embed_dim, cfg.embed_dim);
        ly.bq = ly.bk = ly.bv = ly.bo = Matrix<T>(1, cfg.embed_dim);
        ly.ln1_g = ly.ln1_b = ly.ln2_g = ly.ln2_b = Matrix<T>(1, cfg.embed_dim);
        ly.w1 = Matrix<T>(cfg.embed_dim, cfg.hidden_dim);
        ly.b1 = Matrix<T>(1, cfg.hidden_dim);
        ly.w2 = Matrix<T>(cfg.hidden_dim, cfg.embed_dim);
        ly.b2 = Matrix<T>(1, cfg.embed_dim);
    }
    return e;
}

template <typename T>
GenHead<T> make_gen_head(const ModelConfig& cfg) {
    return {Matrix<T>(cfg.embed_dim, cfg.vocab_size), Matrix<T>(1, cfg.vocab_size)};
}

template <typename T>
ClsHead<T> make_cls_head(const ModelConfig& cfg) {
    return {Matrix<T>(cfg.embed_dim, cfg.embed_dim), Matrix<T>(1, cfg.embed_dim),
            Matrix<T>(cfg.embed_dim, cfg.num_classes), Matrix<T>(1, cfg.num_classes)};
}

// Weight matrices ~ N(0, 0.02^2); biases zero; layer-norm gains one. RNG is
// consumed only by decayed (matrix) tensors, in visitation order.
template <typename S, typename Fn>
void init_struct(S& s, Rng& rng, Fn&& visit) {
    visit(s, [&](const std::string& name, auto& m, bool decay) {
        using VT = typename std::remove_reference_t<decltype(m.a)>::value_type;
        if (decay) {
            for (auto& x : m.a) x = static_cast<VT>(rng.gauss(0.0, 0.02));
        } else if (name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0) {
            for (auto& x : m.a) x = VT(1);
        } else {
            for (auto& x : m.a) x = VT(0);
        }
    });
}

template <typename T>
void init_encoder(Encoder<T>& e, Rng& rng) {
    init_struct(e, rng, [](auto& s, auto&& fn) { visit_encoder(s, fn); });
}
template <typename T>
void init_gen_head(GenHead<T>& g, Rng& rng) {
    init_struct(g, rng, [](auto& s, auto&& fn) { visit_gen_head(s, fn); });
}
template <typename T>
void init_cls_head(ClsHead<T>& c, Rng& rng) {
    init_struct(c, rng, [](auto& s, auto&& fn) { visit_cls_head(s, fn); });
}

template <typename TDst, typename TSrc>
Matrix<TDst> convert(const Matrix<TSrc>& m) {
    Matrix<TDst> out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.a.size(); ++i) out.a[i] = static_cast<TDst>(m.a[i]);
    return out;
}

template <typename TDst, typename TSrc>
Encoder<TDst> convert_encoder(const Encoder<TSrc>& e) {
    Encoder<TDst> out;
    out.tok_emb = convert<TDst>(e.tok_emb);
    out.pos_emb = convert<TDst>(e.pos_emb);
    out.emb_ln_g = convert<TDst>(e.emb_ln_g);
    out.emb_ln_b = convert<TDst>(e.emb_ln_b);
    out.layers.resize(e.layers.size());
    for (std::size_t l = 0; l < e.layers.size(); ++l) {
        const auto& s = e.layers[l];
        auto& d = out.layers[l];
        d.wq = convert<TDst>(s.wq); d.bq = convert<TDst>(s.bq);
        d.wk = convert<TDst>(s.wk); d.bk = convert<TDst>(s.bk);
        d.wv = convert<TDst>(s.wv); d.bv = convert<TDst>(s.bv);
        d.wo = convert<TDst>(s.wo); d.bo = convert<TDst>(s.bo);
        d.ln1_g = convert<TDst>(s.ln1_g); d.ln1_b = convert<TDst>(s.ln1_b);
        d.w1 = convert<TDst>(s.w1); d.b1 = convert<TDst>(s.b1);
        d.w2 = convert<TDst>(s.w2); d.b2 = convert<TDst>(s.b2);
        d.ln2_g = convert<TDst>(s.ln2_g); d.ln2_b = convert<TDst>(s.ln2_b);
    }
    return out;
}

template <typename TDst, typename TSrc>
GenHead<TDst> convert_gen_head(const GenHead<TSrc>& g) {
    return {convert<TDst>(g.w), convert<TDst>(g.b)};
}

template <typename TDst, typename TSrc>
ClsHead<TDst> convert_cls_head(const ClsHead<TSrc>& c) {
    return {convert<TDst>(c.pool_w), convert<TDst>(c.pool_b), convert<TDst>(c.out_w),
            convert<TDst>(c.out_b)};
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

inline constexpr double kLnEps = 1e-5;

template <typename T>
struct LnCache {
    Matrix<T> x_hat;
    std::vector<T> rstd;
};

template <typename T>
struct LayerActs {
    Matrix<T> in, q, k, v;
    Matrix<T> att;  // (num_heads * n) x n, rows grouped by head
    Matrix<T> ctx, attn_proj, drop1, res1;
    LnCache<T> ln1;
    Matrix<T> ln1_out, ff_pre, ff_act, ff_out, drop2, res2;
    LnCache<T> ln2;
    Matrix<T> ln2_out;
};

// Per-sequence activation cache plus backward scratch; reusable across calls.
template <typename T>
struct Acts {
    int n = 0;
    std::vector<int> ids;
    std::vector<char> valid;
    Matrix<T> emb, emb_drop, emb_out;
    LnCache<T> emb_ln;
    std::vector<LayerActs<T>> layers;

    // backward scratch
    Matrix<T> d_a, d_b, d_c, d_ff;

    const Matrix<T>& hidden() const { return layers.empty() ? emb_out : layers.back().ln2_out; }
};

template <typename T>
void ln_rows_forward(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, Matrix<T>& y,
                     LnCache<T>& cache) {
    const int n = x.rows, d = x.cols;
    cache.x_hat = Matrix<T>(n, d);
    cache.rstd.assign(static_cast<std::size_t>(n), T(0));
    if (!y.same_shape(x)) y = Matrix<T>(n, d);
    for (int i = 0; i < n; ++i) {
        const T* xr = x.row(i);
        T mean = T(0);
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        cache.rstd[static_cast<std::size_t>(i)] = rstd;
        T* xh = cache.x_hat.row(i);
        T* yr = y.row(i);
        for (int j = 0; j < d; ++j) {
            xh[j] = (xr[j] - mean) * rstd;
            yr[j] = xh[j] * g.a[static_cast<std::size_t>(j)] + b.a[static_cast<std::size_t>(j)];
        }
    }
}

template <typename T>
void ln_rows_backward(const Matrix<T>& dy, const LnCache<T>& cache, const Matrix<T>& g,
                      Matrix<T>& dx, Matrix<T>& dg, Matrix<T>& db) {
    const int n = dy.rows, d = dy.cols;
    if (!dx.same_shape(dy)) dx = Matrix<T>(n, d);
    for (int i = 0; i < n; ++i) {
        const T* dyr = dy.row(i);
        const T* xh = cache.x_hat.row(i);
        const T rstd = cache.rstd[static_cast<std::size_t>(i)];
        T sum_dyg = T(0), sum_dyg_xh = T(0);
        for (int j = 0; j < d; ++j) {
            const T dyg = dyr[j] * g.a[static_cast<std::size_t>(j)];
            sum_dyg += dyg;
            sum_dyg_xh += dyg * xh[j];
            dg.a[static_cast<std::size_t>(j)] += dyr[j] * xh[j];
            db.a[static_cast<std::size_t>(j)] += dyr[j];
        }
        const T inv_d = T(1) / static_cast<T>(d);
        T* dxr = dx.row(i);
        for (int j = 0; j < d; ++j) {
            const T dyg = dyr[j] * g.a[static_cast<std::size_t>(j)];
            dxr[j] = rstd * (dyg - sum_dyg * inv_d - xh[j] * sum_dyg_xh * inv_d);
        }
    }
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + static_cast<T>(std::erf(static_cast<double>(x) * 0.7071067811865476)));
}

template <typename T>
T gelu_grad(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865476));
    const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;
    return static_cast<T>(cdf + xd * pdf);
}

// Inverted-dropout multipliers (0 or 1/(1-p)) drawn from a per-sequence seed,
// so results do not depend on scheduling. Not generated when p == 0.
template <typename T>
void fill_dropout(Matrix<T>& mask, int rows, int cols, float p, Rng& rng) {
    mask = Matrix<T>(rows, cols);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (auto& x : mask.a) x = rng.uniform() < p ? T(0) : keep_scale;
}

template <typename T>
void apply_mask(Matrix<T>& m, const Matrix<T>& mask) {
    for (std::size_t i = 0; i < m.a.size(); ++i) m.a[i] *= mask.a[i];
}

// Runs the encoder over one sequence. valid[i] == 0 marks padding; padded
// rows are zeroed and skipped as attention queries. dropout_seed is only
// consumed when train_mode and dropout_rate > 0.
template <typename T>
void encoder_forward(const Encoder<T>& enc, const ModelConfig& cfg, std::span<const int> ids,
                     std::span<const char> valid, bool train_mode, std::uint64_t dropout_seed,
                     Acts<T>& acts) {
    const int n = static_cast<int>(ids.size());
    const int d = cfg.embed_dim;
    const int heads = cfg.num_heads;
    const int dh = d / heads;
    const bool drop = train_mode && cfg.dropout_rate > 0.0f;
    Rng drop_rng(dropout_seed);

    acts.n = n;
    acts.ids.assign(ids.begin(), ids.end());
    acts.valid.assign(valid.begin(), valid.end());
    acts.emb = Matrix<T>(n, d);
    for (int i = 0; i < n; ++i) {
        T* r = acts.emb.row(i);
        if (!valid[static_cast<std::size_t>(i)]) continue;
        const T* te = enc.tok_emb.row(ids[static_cast<std::size_t>(i)]);
        const T* pe = enc.pos_emb.row(i);
        for (int j = 0; j < d; ++j) r[j] = te[j] + pe[j];
    }
    ln_rows_forward(acts.emb, enc.emb_ln_g, enc.emb_ln_b, acts.emb_out, acts.emb_ln);
    if (drop) {
        fill_dropout(acts.emb_drop, n, d, cfg.dropout_rate, drop_rng);
        apply_mask(acts.emb_out, acts.emb_drop);
    }

    acts.layers.resize(enc.layers.size());
    const Matrix<T>* x = &acts.emb_out;
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
        const auto& w = enc.layers[l];
        auto& a = acts.layers[l];
        a.in = *x;

        a.q = Matrix<T>(n, d);
        a.k = Matrix<T>(n, d);
        a.v = Matrix<T>(n, d);
        matmul(a.q, a.in, w.wq);
        add_rowwise(a.q, w.bq);
        matmul(a.k, a.in, w.wk);
        add_rowwise(a.k, w.bk);
        matmul(a.v, a.in, w.wv);
        add_rowwise(a.v, w.bv);

        a.att = Matrix<T>(heads * n, n);
        a.ctx = Matrix<T>(n, d);
        std::vector<T> scores(static_cast<std::size_t>(n));
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                if (!acts.valid[static_cast<std::size_t>(i)]) continue;
                const T* qi = a.q.row(i) + off;
                T max_score = T(-1e30);
                for (int j = 0; j < n; ++j) {
                    if (!acts.valid[static_cast<std::size_t>(j)]) continue;
                    const T* kj = a.k.row(j) + off;
                    T s = T(0);
                    for (int e = 0; e < dh; ++e) s += qi[e] * kj[e];
                    s *= inv_sqrt_dh;
                    scores[static_cast<std::size_t>(j)] = s;
                    if (s > max_score) max_score = s;
                }
                T* att_row = a.att.row(h * n + i);
                T denom = T(0);
                for (int j = 0; j < n; ++j) {
                    if (!acts.valid[static_cast<std::size_t>(j)]) {
                        att_row[j] = T(0);
                        continue;
                    }
                    const T e = std::exp(scores[static_cast<std::size_t>(j)] - max_score);
                    att_row[j] = e;
                    denom += e;
                }
                const T inv = T(1) / denom;
                T* ctx_i = a.ctx.row(i) + off;
                for (int j = 0; j < n; ++j) {
                    att_row[j] *= inv;
                    if (att_row[j] == T(0)) continue;
                    const T* vj = a.v.row(j) + off;
                    for (int e = 0; e < dh; ++e) ctx_i[e] += att_row[j] * vj[e];
                }
            }
        }

        a.attn_proj = Matrix<T>(n, d);
        matmul(a.attn_proj, a.ctx, w.wo);
        add_rowwise(a.attn_proj, w.bo);
        if (drop) {
            fill_dropout(a.drop1, n, d, cfg.dropout_rate, drop_rng);
            apply_mask(a.attn_proj, a.drop1);
        }

        a.res1 = a.in;
        accumulate(a.res1, a.attn_proj);
        ln_rows_forward(a.res1, w.ln1_g, w.ln1_b, a.ln1_out, a.ln1);

        a.ff_pre = Matrix<T>(n, cfg.hidden_dim);
        matmul(a.ff_pre, a.ln1_out, w.w1);
        add_rowwise(a.ff_pre, w.b1);
        a.ff_act = Matrix<T>(n, cfg.hidden_dim);
        for (std::size_t i = 0; i < a.ff_pre.a.size(); ++i) a.ff_act.a[i] = gelu(a.ff_pre.a[i]);

        a.ff_out = Matrix<T>(n, d);
        matmul(a.ff_out, a.ff_act, w.w2);
        add_rowwise(a.ff_out, w.b2);
        if (drop) {
            fill_dropout(a.drop2, n, d, cfg.dropout_rate, drop_rng);
            apply_mask(a.ff_out, a.drop2);
        }

        a.res2 = a.ln1_out;
        accumulate(a.res2, a.ff_out);
        ln_rows_forward(a.res2, w.ln2_g, w.ln2_b, a.ln2_out, a.ln2);
        x = &a.ln2_out;
    }
}

// Backpropagates dhidden (gradient w.r.t. the final hidden states) through
// the cached forward pass, accumulating into grad. dhidden is clobbered.
template <typename T>
void encoder_backward(const Encoder<T>& enc, const ModelConfig& cfg, Acts<T>& acts,
                      Matrix<T>& dhidden, Encoder<T>& grad) {
    const int n = acts.n;
    const int d = cfg.embed_dim;
    const int heads = cfg.num_heads;
    const int dh = d / heads;
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    Matrix<T>& d_res = acts.d_a;   // n x d
    Matrix<T>& d_tmp = acts.d_b;   // n x d
    Matrix<T>& d_tmp2 = acts.d_c;  // n x d
    Matrix<T>& d_ff = acts.d_ff;   // n x hidden

    for (int l = static_cast<int>(enc.layers.size()) - 1; l >= 0; --l) {
        const auto& w = enc.layers[static_cast<std::size_t>(l)];
        auto& a = acts.layers[static_cast<std::size_t>(l)];
        auto& gw = grad.layers[static_cast<std::size_t>(l)];

        // ln2: res2 -> out
        ln_rows_backward(dhidden, a.ln2, w.ln2_g, d_res, gw.ln2_g, gw.ln2_b);

        // res2 = ln1_out + ff_out
        if (!d_tmp.same_shape(d_res)) d_tmp = Matrix<T>(n, d);
        d_tmp = d_res;  // d ff_out
        if (a.drop2.rows > 0) apply_mask(d_tmp, a.drop2);

        // ff2: ff_out = ff_act * w2 + b2
        matmul_tn(gw.w2, a.ff_act, d_tmp, true);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gw.b2.a[static_cast<std::size_t>(j)] += d_tmp.at(i, j);
        if (d_ff.rows != n || d_ff.cols != cfg.hidden_dim) d_ff = Matrix<T>(n, cfg.hidden_dim);
        matmul_nt(d_ff, d_tmp, w.w2);

        // gelu
        for (std::size_t i = 0; i < d_ff.a.size(); ++i) d_ff.a[i] *= gelu_grad(a.ff_pre.a[i]);

        // ff1: ff_pre = ln1_out * w1 + b1
        matmul_tn(gw.w1, a.ln1_out, d_ff, true);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < cfg.hidden_dim; ++j)
                gw.b1.a[static_cast<std::size_t>(j)] += d_ff.at(i, j);
        // d ln1_out = d_res (residual) + d_ff * w1^T
        matmul_nt(d_res, d_ff, w.w1, true);

        // ln1: res1 -> ln1_out
        ln_rows_backward(d_res, a.ln1, w.ln1_g, d_tmp, gw.ln1_g, gw.ln1_b);

        // res1 = in + attn_proj; d_tmp now holds d res1
        if (!d_tmp2.same_shape(d_tmp)) d_tmp2 = Matrix<T>(n, d);
        d_tmp2 = d_tmp;  // d attn_proj
        if (a.drop1.rows > 0) apply_mask(d_tmp2, a.drop1);

        // wo: attn_proj = ctx * wo + bo
        matmul_tn(gw.wo, a.ctx, d_tmp2, true);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gw.bo.a[static_cast<std::size_t>(j)] += d_tmp2.at(i, j);
        Matrix<T> d_ctx(n, d);
        matmul_nt(d_ctx, d_tmp2, w.wo);

        // attention
        Matrix<T> d_q(n, d), d_k(n, d), d_v(n, d);
        std::vector<T> d_att_row(static_cast<std::size_t>(n));
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                if (!acts.valid[static_cast<std::size_t>(i)]) continue;
                const T* att_row = a.att.row(h * n + i);
                const T* d_ctx_i = d_ctx.row(i) + off;
                T dot = T(0);
                for (int j = 0; j < n; ++j) {
                    if (att_row[j] == T(0)) {
                        d_att_row[static_cast<std::size_t>(j)] = T(0);
                        continue;
                    }
                    const T* vj = a.v.row(j) + off;
                    T da = T(0);
                    for (int e = 0; e < dh; ++e) {
                        da += d_ctx_i[e] * vj[e];
                        // dv accumulated below with the softmax-adjusted term
                    }
                    d_att_row[static_cast<std::size_t>(j)] = da;
                    dot += att_row[j] * da;
                    T* dvj = d_v.row(j) + off;
                    for (int e = 0; e < dh; ++e) dvj[e] += att_row[j] * d_ctx_i[e];
                }
                const T* qi = a.q.row(i) + off;
                T* dqi = d_q.row(i) + off;
                for (int j = 0; j < n; ++j) {
                    if (att_row[j] == T(0)) continue;
                    const T ds = att_row[j] * (d_att_row[static_cast<std::size_t>(j)] - dot) * inv_sqrt_dh;
                    const T* kj = a.k.row(j) + off;
                    T* dkj = d_k.row(j) + off;
                    for (int e = 0; e < dh; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * qi[e];
                    }
                }
            }
        }

        // q/k/v projections; d_tmp still holds d res1 -> becomes d in
        matmul_tn(gw.wq, a.in, d_q, true);
        matmul_tn(gw.wk, a.in, d_k, true);
        matmul_tn(gw.wv, a.in, d_v, true);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < d; ++j) {
                gw.bq.a[static_cast<std::size_t>(j)] += d_q.at(i, j);
                gw.bk.a[static_cast<std::size_t>(j)] += d_k.at(i, j);
                gw.bv.a[static_cast<std::size_t>(j)] += d_v.at(i, j);
            }
        }
        matmul_nt(d_tmp, d_q, w.wq, true);
        matmul_nt(d_tmp, d_k, w.wk, true);
        matmul_nt(d_tmp, d_v, w.wv, true);
        dhidden = d_tmp;
    }

    // embedding layer norm
    if (acts.emb_drop.rows > 0) apply_mask(dhidden, acts.emb_drop);
    ln_rows_backward(dhidden, acts.emb_ln, enc.emb_ln_g, d_res, grad.emb_ln_g, grad.emb_ln_b);
    for (int i = 0; i < n; ++i) {
        if (!acts.valid[static_cast<std::size_t>(i)]) continue;
        const T* dr = d_res.row(i);
        T* dtok = grad.tok_emb.row(acts.ids[static_cast<std::size_t>(i)]);
        T* dpos = grad.pos_emb.row(i);
        for (int j = 0; j < d; ++j) {
            dtok[j] += dr[j];
            dpos[j] += dr[j];
        }
    }
}

// Softmax cross-entropy at one masked position against the generation head.
// Returns the loss; accumulates head gradients and d hidden(position).
template <typename T>
double gen_loss_backward(const GenHead<T>& gen, const Matrix<T>& hidden, int position, int target,
                         T scale, GenHead<T>& grad, Matrix<T>& dhidden) {
    const int d = hidden.cols;
    const int v = gen.w.cols;
    std::vector<T> logits(static_cast<std::size_t>(v));
    const T* h = hidden.row(position);
    for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] = gen.b.a[static_cast<std::size_t>(j)];
    for (int e = 0; e < d; ++e) {
        const T he = h[e];
        if (he == T(0)) continue;
        const T* wrow = gen.w.row(e);
        for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] += he * wrow[j];
    }
    T max_logit = logits[0];
    for (int j = 1; j < v; ++j) max_logit = std::max(max_logit, logits[static_cast<std::size_t>(j)]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j)
        denom += std::exp(static_cast<double>(logits[static_cast<std::size_t>(j)] - max_logit));
    const double log_denom = std::log(denom);
    const double loss =
        -(static_cast<double>(logits[static_cast<std::size_t>(target)] - max_logit) - log_denom);

    // dlogits = (softmax - onehot) * scale
    std::vector<T> dlogits(static_cast<std::size_t>(v));
    for (int j = 0; j < v; ++j) {
        const double p =
            std::exp(static_cast<double>(logits[static_cast<std::size_t>(j)] - max_logit)) / denom;
        dlogits[static_cast<std::size_t>(j)] =
            static_cast<T>((p - (j == target ? 1.0 : 0.0))) * scale;
    }
    for (int j = 0; j < v; ++j) grad.b.a[static_cast<std::size_t>(j)] += dlogits[static_cast<std::size_t>(j)];
    T* dh = dhidden.row(position);
    for (int e = 0; e < d; ++e) {
        const T he = h[e];
        T* gw = grad.w.row(e);
        const T* wrow = gen.w.row(e);
        T acc = T(0);
        for (int j = 0; j < v; ++j) {
            gw[j] += he * dlogits[static_cast<std::size_t>(j)];
            acc += dlogits[static_cast<std::size_t>(j)] * wrow[j];
        }
        dh[e] += acc;
    }
    return loss;
}

// Class probabilities from the tanh-pooled position-0 representation.
template <typename T>
std::vector<double> cls_probs(const ClsHead<T>& cls, const Matrix<T>& hidden) {
    const int d = hidden.cols;
    const int c = cls.out_w.cols;
    std::vector<T> pooled(static_cast<std::size_t>(d));
    const T* h0 = hidden.row(0);
    for (int j = 0; j < d; ++j) {
        T acc = cls.pool_b.a[static_cast<std::size_t>(j)];
        for (int e = 0; e < d; ++e) acc += h0[e] * cls.pool_w.at(e, j);
        pooled[static_cast<std::size_t>(j)] = std::tanh(acc);
    }
    std::vector<double> logits(static_cast<std::size_t>(c));
    for (int k = 0; k < c; ++k) {
        T acc = cls.out_b.a[static_cast<std::size_t>(k)];
        for (int e = 0; e < d; ++e) acc += pooled[static_cast<std::size_t>(e)] * cls.out_w.at(e, k);
        logits[static_cast<std::size_t>(k)] = static_cast<double>(acc);
    }
    double max_logit = logits[0];
    for (int k = 1; k < c; ++k) max_logit = std::max(max_logit, logits[static_cast<std::size_t>(k)]);
    double denom = 0.0;
    for (int k = 0; k < c; ++k) {
        logits[static_cast<std::size_t>(k)] = std::exp(logits[static_cast<std::size_t>(k)] - max_logit);
        denom += logits[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < c; ++k) logits[static_cast<std::size_t>(k)] /= denom;
    return logits;
}

// Cross-entropy of the label under the classification head. Accumulates head
// gradients and d hidden(0).
template <typename T>
double cls_loss_backward(const ClsHead<T>& cls, const Matrix<T>& hidden, int label, T scale,
                         ClsHead<T>& grad, Matrix<T>& dhidden) {
    const int d = hidden.cols;
    const int c = cls.out_w.cols;
    const T* h0 = hidden.row(0);
    std::vector<T> pooled_pre(static_cast<std::size_t>(d)), pooled(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        T acc = cls.pool_b.a[static_cast<std::size_t>(j)];
        for (int e = 0; e < d; ++e) acc += h0[e] * cls.pool_w.at(e, j);
        pooled_pre[static_cast<std::size_t>(j)] = acc;
        pooled[static_cast<std::size_t>(j)] = std::tanh(acc);
    }
    std::vector<double> probs(static_cast<std::size_t>(c));
    double max_logit = -1e300;
    std::vector<double> logits(static_cast<std::size_t>(c));
    for (int k = 0; k < c; ++k) {
        T acc = cls.out_b.a[static_cast<std::size_t>(k)];
        for (int e = 0; e < d; ++e) acc += pooled[static_cast<std::size_t>(e)] * cls.out_w.at(e, k);
        logits[static_cast<std::size_t>(k)] = static_cast<double>(acc);
        max_logit = std::max(max_logit, logits[static_cast<std::size_t>(k)]);
    }
    double denom = 0.0;
    for (int k = 0; k < c; ++k) {
        probs[static_cast<std::size_t>(k)] = std::exp(logits[static_cast<std::size_t>(k)] - max_logit);
        denom += probs[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < c; ++k) probs[static_cast<std::size_t>(k)] /= denom;
    const double loss = -(logits[static_cast<std::size_t>(label)] - max_logit - std::log(denom));

    std::vector<T> dlogits(static_cast<std::size_t>(c));
    for (int k = 0; k < c; ++k)
        dlogits[static_cast<std::size_t>(k)] =
            static_cast<T>(probs[static_cast<std::size_t>(k)] - (k == label ? 1.0 : 0.0)) * scale;
    std::vector<T> dpooled(static_cast<std::size_t>(d), T(0));
    for (int e = 0; e < d; ++e) {
        T* gw = grad.out_w.row(e);
        const T pe = pooled[static_cast<std::size_t>(e)];
        T acc = T(0);
        for (int k = 0; k < c; ++k) {
            gw[k] += pe * dlogits[static_cast<std::size_t>(k)];
            acc += dlogits[static_cast<std::size_t>(k)] * cls.out_w.at(e, k);
        }
        dpooled[static_cast<std::size_t>(e)] = acc;
    }
    for (int k = 0; k < c; ++k) grad.out_b.a[static_cast<std::size_t>(k)] += dlogits[static_cast<std::size_t>(k)];

    T* dh0 = dhidden.row(0);
    for (int j = 0; j < d; ++j) {
        const T dpre = dpooled[static_cast<std::size_t>(j)] *
                       (T(1) - pooled[static_cast<std::size_t>(j)] * pooled[static_cast<std::size_t>(j)]);
        grad.pool_b.a[static_cast<std::size_t>(j)] += dpre;
        for (int e = 0; e < d; ++e) {
            grad.pool_w.at(e, j) += h0[e] * dpre;
            dh0[e] += dpre * cls.pool_w.at(e, j);
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay)
// ---------------------------------------------------------------------------

template <typename T>
class AdamW {
public:
    void add(Matrix<T>& param, Matrix<T>& grad, bool decay) {
        params_.push_back(&param);
        grads_.push_back(&grad);
        decay_.push_back(decay ? 1 : 0);
        m_.emplace_back(param.rows, param.cols);
        v_.emplace_back(param.rows, param.cols);
    }

    void step(T lr, T weight_decay, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
        ++t_;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), t_));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), t_));
        for (std::size_t p = 0; p < params_.size(); ++p) {
            auto& w = params_[p]->a;
            const auto& g = grads_[p]->a;
            auto& m = m_[p].a;
            auto& v = v_[p].a;
            const bool decay = decay_[p] != 0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
                v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
                const T m_hat = m[i] / bc1;
                const T v_hat = v[i] / bc2;
                T update = m_hat / (std::sqrt(v_hat) + eps);
                if (decay) update += weight_decay * w[i];
                w[i] -= lr * update;
            }
        }
    }

private:
    std::vector<Matrix<T>*> params_;
    std::vector<Matrix<T>*> grads_;
    std::vector<char> decay_;
    std::vector<Matrix<T>> m_, v_;
    long t_ = 0;
};

}  // namespace mixmatch

#endif  // MIXMATCH_NN_HPP
