#pragma once

// Compact transformer encoder trained from scratch, plus the token
// prediction head (dense -> GeLU -> BatchNorm -> vocabulary projection).
//
// Layout: token + position embeddings, LayerNorm, L pre-norm blocks
// (multi-head self-attention, feed-forward), final LayerNorm. Sequences in a
// batch are packed row-wise into one matrix; attention runs per sequence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpbert/common.hpp"
#include "lpbert/text.hpp"

namespace lpbert {

struct EncoderConfig {
    int vocab_size = 0;
    int hidden = 128;
    int layers = 2;
    int heads = 4;
    int ff = 256;
    int max_len = 128;
    double dropout = 0.1;

    void validate() const {
        if (vocab_size < 1 || hidden < 1 || layers < 1 || heads < 1 || ff < 1 || max_len < 1)
            throw Error(ErrorKind::usage, "encoder dimensions must all be >= 1");
        if (hidden % heads != 0) throw Error(ErrorKind::usage, "encoder hidden size must be divisible by the head count");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorKind::usage, "dropout must lie in [0, 1)");
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"vocab_size", c.vocab_size}, {"hidden", c.hidden}, {"layers", c.layers}, {"heads", c.heads},
         {"ff", c.ff},                 {"max_len", c.max_len}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("hidden").get_to(c.hidden);
    j.at("layers").get_to(c.layers);
    j.at("heads").get_to(c.heads);
    j.at("ff").get_to(c.ff);
    j.at("max_len").get_to(c.max_len);
    j.at("dropout").get_to(c.dropout);
}

/// Learning-rate groups: the prediction head versus everything else.
enum class ParamGroup : std::uint8_t { encoder, head };

struct ParamInfo {
    std::string name;
    ParamGroup group;
    bool decay;  // weight decay applies (matrices only)
};

template <typename T>
struct BlockParams {
    Mat<T> ln1_g, ln1_b;
    Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Mat<T> ln2_g, ln2_b;
    Mat<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderParams {
    EncoderConfig config;
    Mat<T> tok_emb, pos_emb, emb_ln_g, emb_ln_b;
    std::vector<BlockParams<T>> blocks;
    Mat<T> final_ln_g, final_ln_b;
    Mat<T> head_w, head_b, bn_g, bn_b, out_w, out_b;
    // BatchNorm running statistics; saved but never optimized.
    Mat<T> bn_mean, bn_var;

    EncoderParams() = default;

    /// Zero-filled tensors of the right shapes.
    explicit EncoderParams(const EncoderConfig& c) : config(c) {
        c.validate();
        const int d = c.hidden;
        tok_emb = Mat<T>::Zero(c.vocab_size, d);
        pos_emb = Mat<T>::Zero(c.max_len, d);
        emb_ln_g = Mat<T>::Zero(1, d);
        emb_ln_b = Mat<T>::Zero(1, d);
        blocks.resize(static_cast<std::size_t>(c.layers));
        for (auto& b : blocks) {
            b.ln1_g = b.ln1_b = b.ln2_g = b.ln2_b = Mat<T>::Zero(1, d);
            b.wq = b.wk = b.wv = b.wo = Mat<T>::Zero(d, d);
            b.bq = b.bk = b.bv = b.bo = Mat<T>::Zero(1, d);
            b.w1 = Mat<T>::Zero(d, c.ff);
            b.b1 = Mat<T>::Zero(1, c.ff);
            b.w2 = Mat<T>::Zero(c.ff, d);
            b.b2 = Mat<T>::Zero(1, d);
        }
        final_ln_g = final_ln_b = Mat<T>::Zero(1, d);
        head_w = Mat<T>::Zero(d, d);
        head_b = bn_g = bn_b = Mat<T>::Zero(1, d);
        out_w = Mat<T>::Zero(d, c.vocab_size);
        out_b = Mat<T>::Zero(1, c.vocab_size);
        bn_mean = Mat<T>::Zero(1, d);
        bn_var = Mat<T>::Ones(1, d);
    }

    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    template <typename F>
    void for_each_buffer(F&& f) {
        f(std::string("head.bn.running_mean"), bn_mean);
        f(std::string("head.bn.running_var"), bn_var);
    }
    template <typename F>
    void for_each_buffer(F&& f) const {
        f(std::string("head.bn.running_mean"), bn_mean);
        f(std::string("head.bn.running_var"), bn_var);
    }

    std::vector<Mat<T>*> tensors() {
        std::vector<Mat<T>*> out;
        for_each([&](const ParamInfo&, Mat<T>& m) { out.push_back(&m); });
        return out;
    }

    std::vector<ParamInfo> infos() const {
        std::vector<ParamInfo> out;
        for_each([&](const ParamInfo& i, const Mat<T>&) { out.push_back(i); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each([&](const ParamInfo&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

    void set_zero() {
        for_each([](const ParamInfo&, Mat<T>& m) { m.setZero(); });
    }

private:
    template <typename Self, typename F>
    static void visit(Self& s, F& f) {
        using G = ParamGroup;
        f(ParamInfo{"embeddings.token", G::encoder, true}, s.tok_emb);
        f(ParamInfo{"embeddings.position", G::encoder, true}, s.pos_emb);
        f(ParamInfo{"embeddings.ln.gamma", G::encoder, false}, s.emb_ln_g);
        f(ParamInfo{"embeddings.ln.beta", G::encoder, false}, s.emb_ln_b);
        for (std::size_t l = 0; l < s.blocks.size(); ++l) {
            auto& b = s.blocks[l];
            const std::string p = "block" + std::to_string(l) + ".";
            f(ParamInfo{p + "ln1.gamma", G::encoder, false}, b.ln1_g);
            f(ParamInfo{p + "ln1.beta", G::encoder, false}, b.ln1_b);
            f(ParamInfo{p + "attn.wq", G::encoder, true}, b.wq);
            f(ParamInfo{p + "attn.bq", G::encoder, false}, b.bq);
            f(ParamInfo{p + "attn.wk", G::encoder, true}, b.wk);
            f(ParamInfo{p + "attn.bk", G::encoder, false}, b.bk);
            f(ParamInfo{p + "attn.wv", G::encoder, true}, b.wv);
            f(ParamInfo{p + "attn.bv", G::encoder, false}, b.bv);
            f(ParamInfo{p + "attn.wo", G::encoder, true}, b.wo);
            f(ParamInfo{p + "attn.bo", G::encoder, false}, b.bo);
            f(ParamInfo{p + "ln2.gamma", G::encoder, false}, b.ln2_g);
            f(ParamInfo{p + "ln2.beta", G::encoder, false}, b.ln2_b);
            f(ParamInfo{p + "ff.w1", G::encoder, true}, b.w1);
            f(ParamInfo{p + "ff.b1", G::encoder, false}, b.b1);
            f(ParamInfo{p + "ff.w2", G::encoder, true}, b.w2);
            f(ParamInfo{p + "ff.b2", G::encoder, false}, b.b2);
        }
        f(ParamInfo{"final_ln.gamma", G::encoder, false}, s.final_ln_g);
        f(ParamInfo{"final_ln.beta", G::encoder, false}, s.final_ln_b);
        f(ParamInfo{"head.dense.w", G::head, true}, s.head_w);
        f(ParamInfo{"head.dense.b", G::head, false}, s.head_b);
        f(ParamInfo{"head.bn.gamma", G::head, false}, s.bn_g);
        f(ParamInfo{"head.bn.beta", G::head, false}, s.bn_b);
        f(ParamInfo{"head.out.w", G::head, true}, s.out_w);
        f(ParamInfo{"head.out.b", G::head, false}, s.out_b);
    }
};

/// Gaussian(0, 0.02) weights and embeddings, zero biases, unit norm gains.
template <typename T>
EncoderParams<T> init_params(const EncoderConfig& config, std::uint64_t seed) {
    EncoderParams<T> p(config);
    Rng rng(seed);
    p.for_each([&](const ParamInfo& info, Mat<T>& m) {
        const bool gain = info.name.ends_with("gamma");
        if (gain) {
            m.setOnes();
        } else if (info.decay) {
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(0.02 * rng.normal());
        }
    });
    return p;
}

template <typename To, typename From>
EncoderParams<To> cast_params(const EncoderParams<From>& src) {
    EncoderParams<To> dst(src.config);
    std::vector<const Mat<From>*> in;
    src.for_each([&](const ParamInfo&, const Mat<From>& m) { in.push_back(&m); });
    std::size_t k = 0;
    dst.for_each([&](const ParamInfo&, Mat<To>& m) { m = in[k++]->template cast<To>(); });
    dst.bn_mean = src.bn_mean.template cast<To>();
    dst.bn_var = src.bn_var.template cast<To>();
    return dst;
}

/// Packed variable-length sequences. Trailing PAD positions are dropped on
/// insertion; interior PAD positions stay and are masked out of attention.
struct TokenBatch {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> offsets{0};

    void add(std::span<const TokenId> seq, bool trim = true) {
        std::size_t n = seq.size();
        if (trim) {
            while (n > 1 && seq[n - 1] == kPad) --n;
        }
        tokens.insert(tokens.end(), seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(n));
        offsets.push_back(tokens.size());
    }
    std::size_t size() const noexcept { return offsets.size() - 1; }
    std::size_t rows() const noexcept { return tokens.size(); }
    std::size_t begin(std::size_t s) const { return offsets[s]; }
    std::size_t length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

namespace nn {

template <typename T>
struct NormCache {
    Mat<T> xhat;
    std::vector<T> rstd;
};

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, NormCache<T>& cache) {
    const auto n = x.rows();
    const auto d = x.cols();
    cache.xhat.resize(n, d);
    cache.rstd.resize(static_cast<std::size_t>(n));
    Mat<T> y(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const T var = (x.row(i).array() - mean).square().mean();
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        cache.rstd[static_cast<std::size_t>(i)] = rstd;
        cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
        y.row(i) = cache.xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
    }
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& g, const NormCache<T>& cache, Mat<T>& dg, Mat<T>& db) {
    const auto n = dy.rows();
    const auto d = static_cast<T>(dy.cols());
    dg.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    db.row(0) += dy.colwise().sum();
    Mat<T> dx(n, dy.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto dxhat = (dy.row(i).array() * g.row(0).array()).eval();
        const T mean_dxhat = dxhat.sum() / d;
        const T mean_dxhat_xhat = (dxhat * cache.xhat.row(i).array()).sum() / d;
        dx.row(i) = cache.rstd[static_cast<std::size_t>(i)] * (dxhat - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat);
    }
    return dx;
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
    const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.3989422804014327);
    return cdf + x * pdf;
}

/// Inverted-dropout mask (entries 0 or 1/(1-p)); empty when inactive.
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng* rng) {
    if (rng == nullptr || p <= 0.0) return {};
    Mat<T> m(rows, cols);
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < p ? T(0) : keep;
    return m;
}

template <typename T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
    if (mask.size() != 0) x.array() *= mask.array();
}

}  // namespace nn

template <typename T>
struct BlockCache {
    nn::NormCache<T> ln1, ln2;
    Mat<T> a, q, k, v, o, f, u, g;
    std::vector<Mat<T>> probs;  // per (sequence, head)
    Mat<T> drop_attn, drop_ff;
};

/// Activations retained for backpropagation.
template <typename T>
struct ForwardCache {
    TokenBatch batch;
    std::vector<std::uint8_t> key_mask;
    nn::NormCache<T> emb_ln;
    Mat<T> drop_emb;
    std::vector<BlockCache<T>> blocks;
    nn::NormCache<T> final_ln;
    Mat<T> out;  // final token states, rows = batch.rows()

    /// CLS state of every sequence.
    Mat<T> pooled() const {
        Mat<T> p(static_cast<Eigen::Index>(batch.size()), out.cols());
        for (std::size_t s = 0; s < batch.size(); ++s) p.row(static_cast<Eigen::Index>(s)) = out.row(static_cast<Eigen::Index>(batch.begin(s)));
        return p;
    }
};

namespace detail {

template <typename T>
void attention_forward(const EncoderConfig& c, const TokenBatch& batch, const std::vector<std::uint8_t>& key_mask, BlockCache<T>& bc) {
    const int dh = c.hidden / c.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    bc.o.resize(bc.q.rows(), bc.q.cols());
    bc.probs.resize(batch.size() * static_cast<std::size_t>(c.heads));
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto off = static_cast<Eigen::Index>(batch.begin(s));
        const auto len = static_cast<Eigen::Index>(batch.length(s));
        for (int h = 0; h < c.heads; ++h) {
            const auto col = static_cast<Eigen::Index>(h * dh);
            auto& P = bc.probs[s * static_cast<std::size_t>(c.heads) + static_cast<std::size_t>(h)];
            P.noalias() = bc.q.block(off, col, len, dh) * bc.k.block(off, col, len, dh).transpose();
            P *= scale;
            for (Eigen::Index r = 0; r < len; ++r) {
                T mx = -std::numeric_limits<T>::infinity();
                for (Eigen::Index j = 0; j < len; ++j)
                    if (key_mask[static_cast<std::size_t>(off + j)]) mx = std::max(mx, P(r, j));
                T sum = 0;
                for (Eigen::Index j = 0; j < len; ++j) {
                    const T e = key_mask[static_cast<std::size_t>(off + j)] ? std::exp(P(r, j) - mx) : T(0);
                    P(r, j) = e;
                    sum += e;
                }
                if (sum > T(0)) P.row(r) /= sum;
            }
            bc.o.block(off, col, len, dh).noalias() = P * bc.v.block(off, col, len, dh);
        }
    }
}

template <typename T>
void attention_backward(const EncoderConfig& c, const TokenBatch& batch, const BlockCache<T>& bc, const Mat<T>& d_o, Mat<T>& dq, Mat<T>& dk,
                        Mat<T>& dv) {
    const int dh = c.hidden / c.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    dq.setZero(d_o.rows(), d_o.cols());
    dk.setZero(d_o.rows(), d_o.cols());
    dv.setZero(d_o.rows(), d_o.cols());
    Mat<T> dP, dS;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto off = static_cast<Eigen::Index>(batch.begin(s));
        const auto len = static_cast<Eigen::Index>(batch.length(s));
        for (int h = 0; h < c.heads; ++h) {
            const auto col = static_cast<Eigen::Index>(h * dh);
            const auto& P = bc.probs[s * static_cast<std::size_t>(c.heads) + static_cast<std::size_t>(h)];
            const auto dO = d_o.block(off, col, len, dh);
            dP.noalias() = dO * bc.v.block(off, col, len, dh).transpose();
            dv.block(off, col, len, dh).noalias() += P.transpose() * dO;
            const auto row_dot = (P.array() * dP.array()).rowwise().sum().eval();
            dS = P.array() * (dP.array().colwise() - row_dot);
            dq.block(off, col, len, dh).noalias() += scale * (dS * bc.k.block(off, col, len, dh));
            dk.block(off, col, len, dh).noalias() += scale * (dS.transpose() * bc.q.block(off, col, len, dh));
        }
    }
}

}  // namespace detail

/// Encoder forward over a packed batch. `dropout_rng` enables training-mode
/// dropout; pass nullptr for deterministic inference.
template <typename T>
ForwardCache<T> forward(const EncoderParams<T>& p, TokenBatch batch, Rng* dropout_rng = nullptr) {
    const auto& c = p.config;
    const double drop = dropout_rng ? c.dropout : 0.0;
    ForwardCache<T> fc;
    fc.batch = std::move(batch);
    const auto n = static_cast<Eigen::Index>(fc.batch.rows());
    const int d = c.hidden;

    fc.key_mask.resize(fc.batch.rows());
    Mat<T> x(n, d);
    for (std::size_t s = 0; s < fc.batch.size(); ++s) {
        const auto len = fc.batch.length(s);
        if (len > static_cast<std::size_t>(c.max_len))
            throw Error(ErrorKind::runtime, "sequence length " + std::to_string(len) + " exceeds max_len " + std::to_string(c.max_len));
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t row = fc.batch.begin(s) + i;
            const TokenId tok = fc.batch.tokens[row];
            if (tok < 0 || tok >= c.vocab_size)
                throw Error(ErrorKind::runtime, "token id " + std::to_string(tok) + " outside vocabulary of size " + std::to_string(c.vocab_size));
            fc.key_mask[row] = tok != kPad;
            x.row(static_cast<Eigen::Index>(row)) = p.tok_emb.row(tok) + p.pos_emb.row(static_cast<Eigen::Index>(i));
        }
    }
    Mat<T> h = nn::layer_norm(x, p.emb_ln_g, p.emb_ln_b, fc.emb_ln);
    fc.drop_emb = nn::dropout_mask<T>(n, d, drop, dropout_rng);
    nn::apply_mask(h, fc.drop_emb);

    fc.blocks.resize(p.blocks.size());
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const auto& bp = p.blocks[l];
        auto& bc = fc.blocks[l];
        bc.a = nn::layer_norm(h, bp.ln1_g, bp.ln1_b, bc.ln1);
        bc.q.noalias() = bc.a * bp.wq;
        bc.q.rowwise() += bp.bq.row(0);
        bc.k.noalias() = bc.a * bp.wk;
        bc.k.rowwise() += bp.bk.row(0);
        bc.v.noalias() = bc.a * bp.wv;
        bc.v.rowwise() += bp.bv.row(0);
        detail::attention_forward(c, fc.batch, fc.key_mask, bc);
        Mat<T> attn_out = bc.o * bp.wo;
        attn_out.rowwise() += bp.bo.row(0);
        bc.drop_attn = nn::dropout_mask<T>(n, d, drop, dropout_rng);
        nn::apply_mask(attn_out, bc.drop_attn);
        h += attn_out;

        bc.f = nn::layer_norm(h, bp.ln2_g, bp.ln2_b, bc.ln2);
        bc.u.noalias() = bc.f * bp.w1;
        bc.u.rowwise() += bp.b1.row(0);
        bc.g = bc.u.unaryExpr([](T v) { return nn::gelu(v); });
        Mat<T> ff_out = bc.g * bp.w2;
        ff_out.rowwise() += bp.b2.row(0);
        bc.drop_ff = nn::dropout_mask<T>(n, d, drop, dropout_rng);
        nn::apply_mask(ff_out, bc.drop_ff);
        h += ff_out;
    }
    fc.out = nn::layer_norm(h, p.final_ln_g, p.final_ln_b, fc.final_ln);
    return fc;
}

/// Accumulates parameter gradients for an upstream gradient on `fc.out`.
template <typename T>
void backward(const EncoderParams<T>& p, const ForwardCache<T>& fc, const Mat<T>& d_out, EncoderParams<T>& grads) {
    const auto& c = p.config;
    Mat<T> dh = nn::layer_norm_backward(d_out, p.final_ln_g, fc.final_ln, grads.final_ln_g, grads.final_ln_b);
    Mat<T> dq, dk, dv;
    for (std::size_t li = p.blocks.size(); li-- > 0;) {
        const auto& bp = p.blocks[li];
        const auto& bc = fc.blocks[li];
        auto& bg = grads.blocks[li];

        Mat<T> dz = dh;
        nn::apply_mask(dz, bc.drop_ff);
        bg.w2.noalias() += bc.g.transpose() * dz;
        bg.b2.row(0) += dz.colwise().sum();
        Mat<T> du = dz * bp.w2.transpose();
        du.array() *= bc.u.unaryExpr([](T v) { return nn::gelu_grad(v); }).array();
        bg.w1.noalias() += bc.f.transpose() * du;
        bg.b1.row(0) += du.colwise().sum();
        Mat<T> df = du * bp.w1.transpose();
        dh += nn::layer_norm_backward(df, bp.ln2_g, bc.ln2, bg.ln2_g, bg.ln2_b);

        Mat<T> dao = dh;
        nn::apply_mask(dao, bc.drop_attn);
        bg.wo.noalias() += bc.o.transpose() * dao;
        bg.bo.row(0) += dao.colwise().sum();
        Mat<T> d_o = dao * bp.wo.transpose();
        detail::attention_backward(c, fc.batch, bc, d_o, dq, dk, dv);
        bg.wq.noalias() += bc.a.transpose() * dq;
        bg.bq.row(0) += dq.colwise().sum();
        bg.wk.noalias() += bc.a.transpose() * dk;
        bg.bk.row(0) += dk.colwise().sum();
        bg.wv.noalias() += bc.a.transpose() * dv;
        bg.bv.row(0) += dv.colwise().sum();
        Mat<T> da = dq * bp.wq.transpose();
        da.noalias() += dk * bp.wk.transpose();
        da.noalias() += dv * bp.wv.transpose();
        dh += nn::layer_norm_backward(da, bp.ln1_g, bc.ln1, bg.ln1_g, bg.ln1_b);
    }
    nn::apply_mask(dh, fc.drop_emb);
    Mat<T> dx = nn::layer_norm_backward(dh, p.emb_ln_g, fc.emb_ln, grads.emb_ln_g, grads.emb_ln_b);
    for (std::size_t s = 0; s < fc.batch.size(); ++s)
        for (std::size_t i = 0; i < fc.batch.length(s); ++i) {
            const auto row = static_cast<Eigen::Index>(fc.batch.begin(s) + i);
            grads.tok_emb.row(fc.batch.tokens[static_cast<std::size_t>(row)]) += dx.row(row);
            grads.pos_emb.row(static_cast<Eigen::Index>(i)) += dx.row(row);
        }
}

template <typename T>
struct EncoderOutput {
    Mat<T> token_states;  // one row per input position
    RowVec<T> pooled;     // == token_states.row(0)
};

/// Inference-mode encoding of one sequence. Positions with mask 0 receive no
/// attention. Trailing masked positions do not influence the other states.
template <typename T>
EncoderOutput<T> encode(std::span<const TokenId> tokens, std::span<const std::uint8_t> mask, const EncoderParams<T>& p) {
    if (tokens.size() != mask.size()) throw Error(ErrorKind::runtime, "tokens and mask differ in length");
    if (tokens.size() > static_cast<std::size_t>(p.config.max_len)) throw Error(ErrorKind::runtime, "input longer than max_len");
    if (tokens.empty()) throw Error(ErrorKind::runtime, "empty input");
    std::vector<TokenId> masked(tokens.begin(), tokens.end());
    for (std::size_t i = 0; i < masked.size(); ++i)
        if (!mask[i]) masked[i] = kPad;
    std::size_t live = masked.size();
    while (live > 1 && !mask[live - 1]) --live;

    TokenBatch prefix;
    prefix.add(std::span<const TokenId>(masked).first(live), false);
    const auto fc = forward(p, std::move(prefix));
    EncoderOutput<T> out;
    out.token_states.resize(static_cast<Eigen::Index>(masked.size()), p.config.hidden);
    out.token_states.topRows(static_cast<Eigen::Index>(live)) = fc.out;
    if (live < masked.size()) {
        TokenBatch full;
        full.add(masked, false);
        const auto ffull = forward(p, std::move(full));
        const auto rest = static_cast<Eigen::Index>(masked.size() - live);
        out.token_states.bottomRows(rest) = ffull.out.bottomRows(rest);
    }
    out.pooled = out.token_states.row(0);
    return out;
}

/// Vectors of many sequences at once (inference mode), CLS pooled.
template <typename T>
Mat<T> encode_pooled(const EncoderParams<T>& p, const std::vector<SequenceLayout>& seqs, std::size_t chunk = 256) {
    Mat<T> out(static_cast<Eigen::Index>(seqs.size()), p.config.hidden);
    for (std::size_t start = 0; start < seqs.size(); start += chunk) {
        TokenBatch b;
        const std::size_t end = std::min(seqs.size(), start + chunk);
        for (std::size_t i = start; i < end; ++i) b.add(seqs[i].tokens);
        const auto fc = forward(p, std::move(b));
        out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) = fc.pooled();
    }
    return out;
}

template <typename T>
struct HeadCache {
    Mat<T> input, z, g, xhat;
    RowVec<T> rstd;
    Mat<T> y;
    bool training = false;
};

/// Token-prediction head. Training mode normalizes with batch statistics
/// over the given rows and updates the running statistics.
template <typename T>
Mat<T> predict_tokens(const Mat<T>& token_states, EncoderParams<T>& p, bool training, HeadCache<T>* cache = nullptr) {
    HeadCache<T> local;
    HeadCache<T>& hc = cache ? *cache : local;
    hc.training = training;
    hc.input = token_states;
    hc.z.noalias() = token_states * p.head_w;
    hc.z.rowwise() += p.head_b.row(0);
    hc.g = hc.z.unaryExpr([](T v) { return nn::gelu(v); });
    const auto m = hc.g.rows();
    RowVec<T> mean, var;
    if (training && m > 0) {
        mean = hc.g.colwise().mean();
        var = (hc.g.rowwise() - mean).array().square().colwise().mean().matrix();
        const T mom = static_cast<T>(nn::kBatchNormMomentum);
        const T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
        p.bn_mean.row(0) = (T(1) - mom) * p.bn_mean.row(0) + mom * mean;
        p.bn_var.row(0) = (T(1) - mom) * p.bn_var.row(0) + mom * unbias * var;
    } else {
        mean = p.bn_mean.row(0);
        var = p.bn_var.row(0);
    }
    hc.rstd = (var.array() + static_cast<T>(nn::kBatchNormEps)).rsqrt().matrix();
    hc.xhat = ((hc.g.rowwise() - mean).array().rowwise() * hc.rstd.array()).matrix();
    hc.y = (hc.xhat.array().rowwise() * p.bn_g.row(0).array()).matrix();
    hc.y.rowwise() += p.bn_b.row(0);
    Mat<T> logits = hc.y * p.out_w;
    logits.rowwise() += p.out_b.row(0);
    return logits;
}

/// Gradient w.r.t. the head input rows; accumulates head parameter grads.
template <typename T>
Mat<T> predict_tokens_backward(const EncoderParams<T>& p, const HeadCache<T>& hc, const Mat<T>& d_logits, EncoderParams<T>& grads) {
    grads.out_w.noalias() += hc.y.transpose() * d_logits;
    grads.out_b.row(0) += d_logits.colwise().sum();
    Mat<T> dy = d_logits * p.out_w.transpose();
    grads.bn_g.row(0) += (dy.array() * hc.xhat.array()).colwise().sum().matrix();
    grads.bn_b.row(0) += dy.colwise().sum();
    Mat<T> dxhat = (dy.array().rowwise() * p.bn_g.row(0).array()).matrix();
    Mat<T> dg;
    if (hc.training) {
        const T m = static_cast<T>(dy.rows());
        const RowVec<T> sum_dxhat = dxhat.colwise().sum();
        const RowVec<T> sum_dxhat_xhat = (dxhat.array() * hc.xhat.array()).colwise().sum().matrix();
        dg = ((dxhat * m).rowwise() - sum_dxhat).array() - hc.xhat.array().rowwise() * sum_dxhat_xhat.array();
        dg = (dg.array().rowwise() * (hc.rstd.array() / m)).matrix();
    } else {
        dg = (dxhat.array().rowwise() * hc.rstd.array()).matrix();
    }
    dg.array() *= hc.z.unaryExpr([](T v) { return nn::gelu_grad(v); }).array();
    grads.head_w.noalias() += hc.input.transpose() * dg;
    grads.head_b.row(0) += dg.colwise().sum();
    return dg * p.head_w.transpose();
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u32 format version, u32 header length, JSON
// header {config, scalar, tensors:[{name, rows, cols}], meta}, then the
// tensors as little-endian row-major arrays in header order.

inline constexpr char kCheckpointMagic[8] = {'L', 'P', 'B', 'E', 'R', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* scalar_tag() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

template <typename T>
void save_checkpoint(const EncoderParams<T>& p, const std::filesystem::path& path, const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["config"] = p.config;
    header["scalar"] = scalar_tag<T>();
    header["meta"] = meta;
    std::vector<const Mat<T>*> data;
    auto record = [&](const std::string& name, const Mat<T>& m) {
        header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
        data.push_back(&m);
    };
    p.for_each([&](const ParamInfo& info, const Mat<T>& m) { record(info.name, m); });
    p.for_each_buffer(record);

    const std::string text = header.dump();
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error(ErrorKind::checkpoint, "cannot write checkpoint " + path.string());
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        const std::uint32_t version = kCheckpointVersion;
        const auto len = static_cast<std::uint32_t>(text.size());
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto* m : data) out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(T)));
        if (!out) throw Error(ErrorKind::checkpoint, "failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
struct LoadedCheckpoint {
    EncoderParams<T> params;
    nlohmann::json meta;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::checkpoint, "cannot open checkpoint " + path.string());
    char magic[8];
    std::uint32_t version = 0, len = 0;
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw Error(ErrorKind::checkpoint, path.string() + ": not a checkpoint (bad magic)");
    if (!in.read(reinterpret_cast<char*>(&version), sizeof version))
        throw Error(ErrorKind::checkpoint, path.string() + ": truncated header");
    if (version != kCheckpointVersion)
        throw Error(ErrorKind::checkpoint, path.string() + ": checkpoint format version " + std::to_string(version) + ", expected " +
                                               std::to_string(kCheckpointVersion));
    if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 26))
        throw Error(ErrorKind::checkpoint, path.string() + ": corrupted header length");
    std::string text(len, '\0');
    if (!in.read(text.data(), len)) throw Error(ErrorKind::checkpoint, path.string() + ": truncated header");

    nlohmann::json header;
    EncoderConfig config;
    try {
        header = nlohmann::json::parse(text);
        config = header.at("config").get<EncoderConfig>();
        config.validate();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::checkpoint, path.string() + ": corrupted header: " + e.what());
    } catch (const Error& e) {
        throw Error(ErrorKind::checkpoint, path.string() + ": corrupted header: " + e.what());
    }
    const std::string scalar = header.value("scalar", "");
    if (scalar != "f32" && scalar != "f64") throw Error(ErrorKind::checkpoint, path.string() + ": unknown scalar type '" + scalar + "'");

    LoadedCheckpoint<T> result{EncoderParams<T>(config), header.value("meta", nlohmann::json::object())};
    std::vector<std::pair<std::string, Mat<T>*>> slots;
    result.params.for_each([&](const ParamInfo& info, Mat<T>& m) { slots.emplace_back(info.name, &m); });
    result.params.for_each_buffer([&](const std::string& name, Mat<T>& m) { slots.emplace_back(name, &m); });
    const auto& tensors = header.at("tensors");
    if (!tensors.is_array() || tensors.size() != slots.size())
        throw Error(ErrorKind::checkpoint, path.string() + ": tensor table does not match the configuration");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& entry = tensors[i];
        auto& [name, m] = slots[i];
        if (entry.value("name", "") != name || entry.value("rows", -1) != m->rows() || entry.value("cols", -1) != m->cols())
            throw Error(ErrorKind::checkpoint, path.string() + ": unexpected tensor entry for " + name);
        auto read_as = [&]<typename S>(S) {
            std::vector<S> buf(static_cast<std::size_t>(m->size()));
            if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(S))))
                throw Error(ErrorKind::checkpoint, path.string() + ": truncated tensor data at " + name);
            for (std::size_t k = 0; k < buf.size(); ++k) m->data()[k] = static_cast<T>(buf[k]);
        };
        if (scalar == "f32") read_as(float{});
        else read_as(double{});
    }
    if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::checkpoint, path.string() + ": trailing bytes after tensor data");
    return result;
}

}  // namespace lpbert
