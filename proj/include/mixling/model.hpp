#pragma once

// Pre-norm Transformer encoder-decoder shared by every task.
//
// The embedding matrix is used three times when tied: encoder input, decoder
// input and output softmax. Inputs are scaled by sqrt(d_model) before the
// sinusoidal position table is added. Forward keeps every intermediate needed
// by the hand-written backward pass in a per-sequence cache.

#include "mixling/common.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <utility>

namespace mixling {

struct ModelConfig {
    int num_layers = 2;
    int num_heads = 4;
    int d_model = 128;
    int d_ff = 512;
    double dropout = 0.1;
    int vocab_size = 4000;
    int max_positions = 512;
    bool tie_embeddings = true;

    void validate() const {
        if (num_layers <= 0 || num_heads <= 0 || d_model <= 0 || d_ff <= 0 || max_positions <= 0) {
            throw Error("model config: layer, head, width and position counts must be positive");
        }
        if (vocab_size < 0) throw Error("model config: negative vocabulary size");
        if (d_model % num_heads != 0) throw Error("model config: d_model must be divisible by num_heads");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("model config: dropout must lie in [0, 1)");
    }

    int head_dim() const { return d_model / num_heads; }

    // 6 layers, 8 heads, d_model 512, d_ff 2048, dropout 0.1.
    static ModelConfig base(int vocab = 33000) { return {6, 8, 512, 2048, 0.1, vocab, 512, true}; }
    static ModelConfig desk(int vocab) { return {2, 4, 64, 256, 0.1, vocab, 128, true}; }

    bool operator==(const ModelConfig&) const = default;
};

// Closed-form parameter count.
inline std::int64_t count_params(const ModelConfig& c) {
    c.validate();
    const std::int64_t d = c.d_model, ff = c.d_ff, v = c.vocab_size;
    const std::int64_t attention = 4 * (d * d + d);
    const std::int64_t ffn = d * ff + ff + ff * d + d;
    const std::int64_t norm = 2 * d;
    const std::int64_t encoder_layer = attention + ffn + 2 * norm;
    const std::int64_t decoder_layer = 2 * attention + ffn + 3 * norm;
    const std::int64_t embeddings = (c.tie_embeddings ? 1 : 3) * v * d;
    return embeddings + c.num_layers * (encoder_layer + decoder_layer) + 2 * norm;
}

template <typename T>
struct Linear {
    Mat<T> w;  // in x out
    Mat<T> b;  // 1 x out
};

template <typename T>
struct LayerNorm {
    Mat<T> gain;  // 1 x d
    Mat<T> bias;  // 1 x d
};

template <typename T>
struct Attention {
    Linear<T> q, k, v, o;
};

template <typename T>
struct FeedForward {
    Linear<T> in, out;
};

template <typename T>
struct EncoderLayer {
    LayerNorm<T> norm1;
    Attention<T> self_attn;
    LayerNorm<T> norm2;
    FeedForward<T> ffn;
};

template <typename T>
struct DecoderLayer {
    LayerNorm<T> norm1;
    Attention<T> self_attn;
    LayerNorm<T> norm2;
    Attention<T> cross_attn;
    LayerNorm<T> norm3;
    FeedForward<T> ffn;
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    Mat<T> embedding;          // vocab x d; the only embedding when tied
    Mat<T> decoder_embedding;  // untied only
    Mat<T> output_projection;  // untied only, vocab x d
    std::vector<EncoderLayer<T>> encoder;
    LayerNorm<T> encoder_norm;
    std::vector<DecoderLayer<T>> decoder;
    LayerNorm<T> decoder_norm;

    const Mat<T>& encoder_embedding_matrix() const { return embedding; }
    const Mat<T>& decoder_embedding_matrix() const { return config.tie_embeddings ? embedding : decoder_embedding; }
    const Mat<T>& output_matrix() const { return config.tie_embeddings ? embedding : output_projection; }
    Mat<T>& encoder_embedding_matrix() { return embedding; }
    Mat<T>& decoder_embedding_matrix() { return config.tie_embeddings ? embedding : decoder_embedding; }
    Mat<T>& output_matrix() { return config.tie_embeddings ? embedding : output_projection; }

    // Zero-filled tensors with the layout implied by `config`.
    static ModelParams zeros(const ModelConfig& config) {
        config.validate();
        ModelParams p;
        p.config = config;
        const int d = config.d_model, ff = config.d_ff, v = config.vocab_size;
        auto lin = [](int in, int out) { return Linear<T>{Mat<T>::Zero(in, out), Mat<T>::Zero(1, out)}; };
        auto norm = [&] { return LayerNorm<T>{Mat<T>::Zero(1, d), Mat<T>::Zero(1, d)}; };
        auto attn = [&] { return Attention<T>{lin(d, d), lin(d, d), lin(d, d), lin(d, d)}; };
        auto ffn = [&] { return FeedForward<T>{lin(d, ff), lin(ff, d)}; };
        p.embedding = Mat<T>::Zero(v, d);
        if (!config.tie_embeddings) {
            p.decoder_embedding = Mat<T>::Zero(v, d);
            p.output_projection = Mat<T>::Zero(v, d);
        }
        for (int l = 0; l < config.num_layers; ++l) {
            p.encoder.push_back({norm(), attn(), norm(), ffn()});
            p.decoder.push_back({norm(), attn(), norm(), attn(), norm(), ffn()});
        }
        p.encoder_norm = norm();
        p.decoder_norm = norm();
        return p;
    }

    // Visits every tensor in a fixed declared order with a stable name.
    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    std::vector<Mat<T>*> tensors() {
        std::vector<Mat<T>*> out;
        for_each([&](const std::string&, Mat<T>& m) { out.push_back(&m); });
        return out;
    }
    std::vector<const Mat<T>*> tensors() const {
        std::vector<const Mat<T>*> out;
        for_each([&](const std::string&, const Mat<T>& m) { out.push_back(&m); });
        return out;
    }

    std::int64_t element_count() const {
        std::int64_t n = 0;
        for_each([&](const std::string&, const Mat<T>& m) { n += m.size(); });
        return n;
    }

    void set_zero() {
        for_each([](const std::string&, Mat<T>& m) { m.setZero(); });
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out = ModelParams<U>::zeros(config);
        auto dst = out.tensors();
        auto src = tensors();
        for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
        return out;
    }

   private:
    template <typename Self, typename F>
    static void visit(Self& self, F& f) {
        auto lin = [&](const std::string& n, auto& l) {
            f(n + ".w", l.w);
            f(n + ".b", l.b);
        };
        auto norm = [&](const std::string& n, auto& ln) {
            f(n + ".gain", ln.gain);
            f(n + ".bias", ln.bias);
        };
        auto attn = [&](const std::string& n, auto& a) {
            lin(n + ".q", a.q);
            lin(n + ".k", a.k);
            lin(n + ".v", a.v);
            lin(n + ".o", a.o);
        };
        auto ffn = [&](const std::string& n, auto& x) {
            lin(n + ".in", x.in);
            lin(n + ".out", x.out);
        };
        f(std::string("embedding"), self.embedding);
        if (!self.config.tie_embeddings) {
            f(std::string("decoder_embedding"), self.decoder_embedding);
            f(std::string("output_projection"), self.output_projection);
        }
        for (std::size_t l = 0; l < self.encoder.size(); ++l) {
            const std::string n = "encoder." + std::to_string(l);
            norm(n + ".norm1", self.encoder[l].norm1);
            attn(n + ".self_attn", self.encoder[l].self_attn);
            norm(n + ".norm2", self.encoder[l].norm2);
            ffn(n + ".ffn", self.encoder[l].ffn);
        }
        norm("encoder.norm", self.encoder_norm);
        for (std::size_t l = 0; l < self.decoder.size(); ++l) {
            const std::string n = "decoder." + std::to_string(l);
            norm(n + ".norm1", self.decoder[l].norm1);
            attn(n + ".self_attn", self.decoder[l].self_attn);
            norm(n + ".norm2", self.decoder[l].norm2);
            attn(n + ".cross_attn", self.decoder[l].cross_attn);
            norm(n + ".norm3", self.decoder[l].norm3);
            ffn(n + ".ffn", self.decoder[l].ffn);
        }
        norm("decoder.norm", self.decoder_norm);
    }
};

// Weight matrices ~ N(0, 1/fan_in), embeddings ~ N(0, 1/d_model), biases 0,
// normalization gains 1.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, Rng& rng) {
    auto p = ModelParams<T>::zeros(config);
    p.for_each([&](const std::string& name, Mat<T>& m) {
        const auto ends_with = [&](std::string_view s) {
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with(".gain")) {
            m.setOnes();
        } else if (ends_with(".b") || ends_with(".bias")) {
            m.setZero();
        } else {
            const bool is_embedding = name == "embedding" || name == "decoder_embedding" || name == "output_projection";
            const double fan_in = is_embedding ? config.d_model : static_cast<double>(m.rows());
            const double std = 1.0 / std::sqrt(fan_in);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * standard_normal(rng));
        }
    });
    return p;
}

template <typename T>
Mat<T> sinusoid_positions(std::size_t len, int d) {
    Mat<T> pe(static_cast<Eigen::Index>(len), d);
    for (std::size_t pos = 0; pos < len; ++pos) {
        for (int i = 0; i < d; i += 2) {
            const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / d);
            pe(static_cast<Eigen::Index>(pos), i) = static_cast<T>(std::sin(angle));
            if (i + 1 < d) pe(static_cast<Eigen::Index>(pos), i + 1) = static_cast<T>(std::cos(angle));
        }
    }
    return pe;
}

namespace detail {

inline constexpr double kNormEps = 1e-6;

template <typename T>
struct NormCache {
    Mat<T> xhat;
    std::vector<T> inv_std;
};

template <typename T>
struct AttnCache {
    Mat<T> xq, xkv, q, k, v, concat;
    std::vector<Mat<T>> probs;  // one Lq x Lk map per head
};

template <typename T>
struct FfnCache {
    Mat<T> x, hidden;  // hidden is post-ReLU
};

template <typename T>
struct EncoderLayerCache {
    NormCache<T> n1, n2;
    AttnCache<T> attn;
    FfnCache<T> ffn;
    Mat<T> drop1, drop2;
};

template <typename T>
struct DecoderLayerCache {
    NormCache<T> n1, n2, n3;
    AttnCache<T> self_attn, cross_attn;
    FfnCache<T> ffn;
    Mat<T> drop1, drop2, drop3;
};

// Which keys a query row may attend to.
struct KeyMask {
    const std::vector<char>* valid = nullptr;  // null: every key valid
    bool causal = false;

    bool allowed(Eigen::Index query, Eigen::Index key) const {
        if (causal && key > query) return false;
        return valid == nullptr || (*valid)[static_cast<std::size_t>(key)] != 0;
    }
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const LayerNorm<T>& ln, NormCache<T>* cache) {
    const Eigen::Index rows = x.rows(), d = x.cols();
    Mat<T> xhat(rows, d);
    std::vector<T> inv(static_cast<std::size_t>(rows));
    for (Eigen::Index r = 0; r < rows; ++r) {
        const T mean = x.row(r).mean();
        const T var = (x.row(r).array() - mean).square().mean();
        const T is = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
        inv[static_cast<std::size_t>(r)] = is;
        xhat.row(r) = (x.row(r).array() - mean) * is;
    }
    Mat<T> y = (xhat.array().rowwise() * ln.gain.row(0).array()).rowwise() + ln.bias.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv);
    }
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNorm<T>& ln, const NormCache<T>& c, LayerNorm<T>& grad) {
    grad.gain.row(0).array() += (dy.array() * c.xhat.array()).colwise().sum();
    grad.bias.row(0) += dy.colwise().sum();
    Mat<T> dxhat = dy.array().rowwise() * ln.gain.row(0).array();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const T m1 = dxhat.row(r).mean();
        const T m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
        dx.row(r) = c.inv_std[static_cast<std::size_t>(r)] *
                    (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2).matrix();
    }
    return dx;
}

template <typename T>
Mat<T> linear(const Mat<T>& x, const Linear<T>& l) {
    Mat<T> y(x.rows(), l.w.cols());
    y.noalias() = x * l.w;
    y.rowwise() += l.b.row(0);
    return y;
}

// Accumulates weight and bias gradients, returns dL/dx.
template <typename T>
Mat<T> linear_backward(const Mat<T>& dy, const Mat<T>& x, const Linear<T>& l, Linear<T>& grad) {
    grad.w.noalias() += x.transpose() * dy;
    grad.b.row(0) += dy.colwise().sum();
    Mat<T> dx(dy.rows(), l.w.rows());
    dx.noalias() = dy * l.w.transpose();
    return dx;
}

template <typename T>
Mat<T> attention(const Mat<T>& xq, const Mat<T>& xkv, const Attention<T>& a, int heads, const KeyMask& mask,
                 AttnCache<T>* cache) {
    const Eigen::Index lq = xq.rows(), lk = xkv.rows(), d = xq.cols();
    const Eigen::Index dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> q = linear(xq, a.q);
    Mat<T> k = linear(xkv, a.k);
    Mat<T> v = linear(xkv, a.v);
    Mat<T> concat(lq, d);
    std::vector<Mat<T>> probs;
    if (cache) probs.reserve(static_cast<std::size_t>(heads));
    Mat<T> p(lq, lk);
    for (int h = 0; h < heads; ++h) {
        const auto qh = q.middleCols(h * dh, dh);
        const auto kh = k.middleCols(h * dh, dh);
        p.noalias() = qh * kh.transpose();
        for (Eigen::Index i = 0; i < lq; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (Eigen::Index j = 0; j < lk; ++j) {
                if (mask.allowed(i, j)) mx = std::max(mx, p(i, j) * scale);
            }
            if (!std::isfinite(mx)) throw Error("attention row has no visible keys");
            T sum = 0;
            for (Eigen::Index j = 0; j < lk; ++j) {
                const T e = mask.allowed(i, j) ? std::exp(p(i, j) * scale - mx) : T(0);
                p(i, j) = e;
                sum += e;
            }
            p.row(i) /= sum;
        }
        concat.middleCols(h * dh, dh).noalias() = p * v.middleCols(h * dh, dh);
        if (cache) probs.push_back(p);
    }
    Mat<T> out = linear(concat, a.o);
    if (cache) {
        cache->xq = xq;
        cache->xkv = xkv;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->concat = std::move(concat);
        cache->probs = std::move(probs);
    }
    return out;
}

// Returns (dL/dxq, dL/dxkv).
template <typename T>
std::pair<Mat<T>, Mat<T>> attention_backward(const Mat<T>& dout, const Attention<T>& a, int heads,
                                             const AttnCache<T>& c, Attention<T>& grad) {
    const Eigen::Index d = c.q.cols(), dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> dconcat = linear_backward(dout, c.concat, a.o, grad.o);
    Mat<T> dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Mat<T>& p = c.probs[static_cast<std::size_t>(h)];
        const auto doh = dconcat.middleCols(h * dh, dh);
        Mat<T> dp = doh * c.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
        Mat<T> ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
        dq.middleCols(h * dh, dh).noalias() = scale * (ds * c.k.middleCols(h * dh, dh));
        dk.middleCols(h * dh, dh).noalias() = scale * (ds.transpose() * c.q.middleCols(h * dh, dh));
    }
    Mat<T> dxq = linear_backward(dq, c.xq, a.q, grad.q);
    Mat<T> dxkv = linear_backward(dk, c.xkv, a.k, grad.k);
    dxkv += linear_backward(dv, c.xkv, a.v, grad.v);
    return {std::move(dxq), std::move(dxkv)};
}

template <typename T>
Mat<T> feed_forward(const Mat<T>& x, const FeedForward<T>& f, FfnCache<T>* cache) {
    Mat<T> hidden = linear(x, f.in).cwiseMax(T(0));
    Mat<T> out = linear(hidden, f.out);
    if (cache) {
        cache->x = x;
        cache->hidden = std::move(hidden);
    }
    return out;
}

template <typename T>
Mat<T> feed_forward_backward(const Mat<T>& dout, const FeedForward<T>& f, const FfnCache<T>& c,
                             FeedForward<T>& grad) {
    Mat<T> dhidden = linear_backward(dout, c.hidden, f.out, grad.out);
    dhidden = (c.hidden.array() > T(0)).select(dhidden, T(0));
    return linear_backward(dhidden, c.x, f.in, grad.in);
}

// Inverted dropout. Returns an empty mask when inactive.
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng* rng) {
    if (rng == nullptr || p <= 0.0) return {};
    Mat<T> m(rows, cols);
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bernoulli(*rng, p) ? T(0) : keep;
    return m;
}

template <typename T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
    if (mask.size() != 0) x.array() *= mask.array();
}

}  // namespace detail

template <typename T>
struct EncoderState {
    TokenIds ids;
    std::vector<char> valid;  // key mask derived from padding
    Mat<T> output;            // final-normed encoder states
    Mat<T> drop_embed;
    std::vector<detail::EncoderLayerCache<T>> layers;
    detail::NormCache<T> final_norm;
};

template <typename T>
struct DecoderState {
    TokenIds ids;
    std::vector<char> valid;
    Eigen::Index first_logit_row = 0;
    Mat<T> final;  // final-normed decoder states for the emitted rows
    Mat<T> drop_embed;
    std::vector<detail::DecoderLayerCache<T>> layers;
    detail::NormCache<T> final_norm;
};

namespace detail {

template <typename T>
void check_ids(const ModelConfig& c, std::span<const TokenId> ids, const char* what) {
    if (ids.empty()) throw Error(std::string(what) + ": empty sequence");
    if (ids.size() > static_cast<std::size_t>(c.max_positions)) {
        throw Error(std::string(what) + ": length " + std::to_string(ids.size()) + " exceeds max_positions " +
                    std::to_string(c.max_positions));
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= c.vocab_size) {
            throw Error(std::string(what) + ": id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                        " is outside the vocabulary");
        }
    }
}

template <typename T>
Mat<T> embed(const Mat<T>& table, std::span<const TokenId> ids, int d) {
    Mat<T> x = sinusoid_positions<T>(ids.size(), d);
    const T s = std::sqrt(static_cast<T>(d));
    for (std::size_t i = 0; i < ids.size(); ++i) x.row(static_cast<Eigen::Index>(i)) += s * table.row(ids[i]);
    return x;
}

inline std::vector<char> valid_mask(std::span<const TokenId> ids, TokenId pad) {
    std::vector<char> v(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) v[i] = ids[i] != pad;
    return v;
}

}  // namespace detail

// Runs the encoder. Positions holding `pad_id` are hidden from attention.
// `rng` non-null switches dropout on.
template <typename T>
EncoderState<T> encode(const ModelParams<T>& p, std::span<const TokenId> src, TokenId pad_id, Rng* rng = nullptr) {
    const auto& c = p.config;
    detail::check_ids<T>(c, src, "encoder input");
    EncoderState<T> st;
    st.ids.assign(src.begin(), src.end());
    st.valid = detail::valid_mask(src, pad_id);
    if (std::none_of(st.valid.begin(), st.valid.end(), [](char v) { return v; })) {
        throw Error("encoder input consists only of padding");
    }
    Mat<T> x = detail::embed(p.encoder_embedding_matrix(), src, c.d_model);
    st.drop_embed = detail::dropout_mask<T>(x.rows(), x.cols(), c.dropout, rng);
    detail::apply_mask(x, st.drop_embed);
    const detail::KeyMask mask{&st.valid, false};
    st.layers.resize(p.encoder.size());
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
        const auto& layer = p.encoder[l];
        auto& lc = st.layers[l];
        Mat<T> a = detail::layer_norm(x, layer.norm1, &lc.n1);
        Mat<T> s = detail::attention(a, a, layer.self_attn, c.num_heads, mask, &lc.attn);
        lc.drop1 = detail::dropout_mask<T>(s.rows(), s.cols(), c.dropout, rng);
        detail::apply_mask(s, lc.drop1);
        x += s;
        Mat<T> b = detail::layer_norm(x, layer.norm2, &lc.n2);
        Mat<T> f = detail::feed_forward(b, layer.ffn, &lc.ffn);
        lc.drop2 = detail::dropout_mask<T>(f.rows(), f.cols(), c.dropout, rng);
        detail::apply_mask(f, lc.drop2);
        x += f;
    }
    st.output = detail::layer_norm(x, p.encoder_norm, &st.final_norm);
    return st;
}

// Runs the decoder against an encoded source and returns logits for rows
// [first_logit_row, len). Decoder self-attention is causal and ignores pads.
template <typename T>
Mat<T> decode_logits(const ModelParams<T>& p, const EncoderState<T>& enc, std::span<const TokenId> dec_in,
                     TokenId pad_id, Rng* rng, DecoderState<T>& st, Eigen::Index first_logit_row = 0) {
    const auto& c = p.config;
    detail::check_ids<T>(c, dec_in, "decoder input");
    if (first_logit_row < 0 || first_logit_row >= static_cast<Eigen::Index>(dec_in.size())) {
        throw Error("decode_logits: first logit row out of range");
    }
    st.ids.assign(dec_in.begin(), dec_in.end());
    st.valid = detail::valid_mask(dec_in, pad_id);
    st.valid[0] = 1;  // every causal row must see at least one key
    st.first_logit_row = first_logit_row;
    Mat<T> y = detail::embed(p.decoder_embedding_matrix(), dec_in, c.d_model);
    st.drop_embed = detail::dropout_mask<T>(y.rows(), y.cols(), c.dropout, rng);
    detail::apply_mask(y, st.drop_embed);
    const detail::KeyMask self_mask{&st.valid, true};
    const detail::KeyMask cross_mask{&enc.valid, false};
    st.layers.resize(p.decoder.size());
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        const auto& layer = p.decoder[l];
        auto& lc = st.layers[l];
        Mat<T> a = detail::layer_norm(y, layer.norm1, &lc.n1);
        Mat<T> s = detail::attention(a, a, layer.self_attn, c.num_heads, self_mask, &lc.self_attn);
        lc.drop1 = detail::dropout_mask<T>(s.rows(), s.cols(), c.dropout, rng);
        detail::apply_mask(s, lc.drop1);
        y += s;
        Mat<T> b = detail::layer_norm(y, layer.norm2, &lc.n2);
        Mat<T> x = detail::attention(b, enc.output, layer.cross_attn, c.num_heads, cross_mask, &lc.cross_attn);
        lc.drop2 = detail::dropout_mask<T>(x.rows(), x.cols(), c.dropout, rng);
        detail::apply_mask(x, lc.drop2);
        y += x;
        Mat<T> g = detail::layer_norm(y, layer.norm3, &lc.n3);
        Mat<T> f = detail::feed_forward(g, layer.ffn, &lc.ffn);
        lc.drop3 = detail::dropout_mask<T>(f.rows(), f.cols(), c.dropout, rng);
        detail::apply_mask(f, lc.drop3);
        y += f;
    }
    // The final norm is row-wise, so only the emitted rows are needed.
    const Eigen::Index rows = y.rows() - first_logit_row;
    Mat<T> tail = y.bottomRows(rows);
    st.final = detail::layer_norm(tail, p.decoder_norm, &st.final_norm);
    Mat<T> logits(rows, c.vocab_size);
    logits.noalias() = st.final * p.output_matrix().transpose();
    return logits;
}

template <typename T>
Mat<T> decode_logits(const ModelParams<T>& p, const EncoderState<T>& enc, std::span<const TokenId> dec_in,
                     TokenId pad_id, Eigen::Index first_logit_row = 0) {
    DecoderState<T> st;
    return decode_logits(p, enc, dec_in, pad_id, nullptr, st, first_logit_row);
}

// Full forward pass for one (source, decoder input) pair: logits for every
// decoder position.
template <typename T>
Mat<T> forward(const ModelParams<T>& p, std::span<const TokenId> src, std::span<const TokenId> dec_in,
               TokenId pad_id, Rng* rng = nullptr) {
    const auto enc = encode(p, src, pad_id, rng);
    DecoderState<T> st;
    return decode_logits(p, enc, dec_in, pad_id, rng, st, 0);
}

// Batched forward over padded rows: one (tgt_len x vocab) matrix per row.
template <typename T>
std::vector<Mat<T>> forward_batch(const ModelParams<T>& p, const std::vector<TokenIds>& src,
                                  const std::vector<TokenIds>& dec_in, TokenId pad_id, bool train_mode, Rng* rng) {
    if (src.size() != dec_in.size()) throw Error("forward: batch size mismatch");
    if (train_mode && rng == nullptr) throw Error("forward: train mode needs a generator");
    std::vector<Mat<T>> out;
    out.reserve(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out.push_back(forward(p, src[i], dec_in[i], pad_id, train_mode ? rng : nullptr));
    return out;
}

// Backpropagates dL/dlogits through one decoder and encoder pass, adding into
// `grad`. `dlogits` covers the rows the decoder state emitted.
template <typename T>
void backward(const ModelParams<T>& p, const EncoderState<T>& enc, const DecoderState<T>& dec, const Mat<T>& dlogits,
              ModelParams<T>& grad) {
    const auto& c = p.config;
    const int heads = c.num_heads;
    const T emb_scale = std::sqrt(static_cast<T>(c.d_model));

    grad.output_matrix().noalias() += dlogits.transpose() * dec.final;
    Mat<T> dtail = dlogits * p.output_matrix();
    dtail = detail::layer_norm_backward(dtail, p.decoder_norm, dec.final_norm, grad.decoder_norm);
    Mat<T> dy = Mat<T>::Zero(static_cast<Eigen::Index>(dec.ids.size()), c.d_model);
    dy.bottomRows(dtail.rows()) = dtail;

    Mat<T> denc = Mat<T>::Zero(enc.output.rows(), enc.output.cols());
    for (std::size_t l = p.decoder.size(); l-- > 0;) {
        const auto& layer = p.decoder[l];
        auto& gl = grad.decoder[l];
        const auto& lc = dec.layers[l];
        Mat<T> df = dy;
        detail::apply_mask(df, lc.drop3);
        dy += detail::layer_norm_backward(detail::feed_forward_backward(df, layer.ffn, lc.ffn, gl.ffn), layer.norm3,
                                          lc.n3, gl.norm3);
        Mat<T> dx = dy;
        detail::apply_mask(dx, lc.drop2);
        auto [dq, dkv] = detail::attention_backward(dx, layer.cross_attn, heads, lc.cross_attn, gl.cross_attn);
        denc += dkv;
        dy += detail::layer_norm_backward(dq, layer.norm2, lc.n2, gl.norm2);
        Mat<T> ds = dy;
        detail::apply_mask(ds, lc.drop1);
        auto [sq, skv] = detail::attention_backward(ds, layer.self_attn, heads, lc.self_attn, gl.self_attn);
        sq += skv;
        dy += detail::layer_norm_backward(sq, layer.norm1, lc.n1, gl.norm1);
    }
    detail::apply_mask(dy, dec.drop_embed);
    auto& dec_table = grad.decoder_embedding_matrix();
    for (std::size_t i = 0; i < dec.ids.size(); ++i) {
        dec_table.row(dec.ids[i]) += emb_scale * dy.row(static_cast<Eigen::Index>(i));
    }

    Mat<T> dx = detail::layer_norm_backward(denc, p.encoder_norm, enc.final_norm, grad.encoder_norm);
    for (std::size_t l = p.encoder.size(); l-- > 0;) {
        const auto& layer = p.encoder[l];
        auto& gl = grad.encoder[l];
        const auto& lc = enc.layers[l];
        Mat<T> df = dx;
        detail::apply_mask(df, lc.drop2);
        dx += detail::layer_norm_backward(detail::feed_forward_backward(df, layer.ffn, lc.ffn, gl.ffn), layer.norm2,
                                          lc.n2, gl.norm2);
        Mat<T> ds = dx;
        detail::apply_mask(ds, lc.drop1);
        auto [sq, skv] = detail::attention_backward(ds, layer.self_attn, heads, lc.attn, gl.self_attn);
        sq += skv;
        dx += detail::layer_norm_backward(sq, layer.norm1, lc.n1, gl.norm1);
    }
    detail::apply_mask(dx, enc.drop_embed);
    auto& enc_table = grad.encoder_embedding_matrix();
    for (std::size_t i = 0; i < enc.ids.size(); ++i) {
        enc_table.row(enc.ids[i]) += emb_scale * dx.row(static_cast<Eigen::Index>(i));
    }
}

}  // namespace mixling
