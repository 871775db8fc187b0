#pragma once

#include "mixling/common.hpp"
#include "mixling/model.hpp"
#include "mixling/objectives.hpp"

#include <chrono>
#include <functional>
#include <optional>
#include <ostream>

namespace mixling {

template <typename T>
struct LossValue {
    T loss = 0;               // mean NLL over counted tokens
    std::size_t tokens = 0;
};

namespace detail {

// Sum of token NLLs over non-pad labels. When `dlogits` is given it receives
// scale * (softmax - onehot) on counted rows and zero elsewhere.
template <typename T>
std::pair<T, std::size_t> nll_sum(const Mat<T>& logits, std::span<const TokenId> labels, TokenId pad_id,
                                  Mat<T>* dlogits, T scale) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw Error("loss: logits/labels length mismatch");
    if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
    T total = 0;
    std::size_t count = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const TokenId y = labels[static_cast<std::size_t>(r)];
        if (y == pad_id) continue;
        if (y < 0 || y >= logits.cols()) throw Error("loss: label id out of range");
        const T mx = logits.row(r).maxCoeff();
        const T lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        total += lse - logits(r, y);
        ++count;
        if (dlogits) {
            dlogits->row(r) = scale * (logits.row(r).array() - lse).exp().matrix();
            (*dlogits)(r, y) -= scale;
        }
    }
    return {total, count};
}

}  // namespace detail

// Mean token-level negative log-likelihood; pad labels contribute nothing.
template <typename T>
LossValue<T> loss(const Mat<T>& logits, std::span<const TokenId> labels, TokenId pad_id) {
    auto [sum, count] = detail::nll_sum<T>(logits, labels, pad_id, nullptr, T(1));
    if (count == 0) throw Error("loss: no non-pad target tokens");
    return {sum / static_cast<T>(count), count};
}

// Exact gradient of the batch-mean token NLL. `grad` is overwritten. A
// non-null `dropout_rng` runs the model in train mode.
template <typename T>
LossValue<T> compute_gradients(const ModelParams<T>& p, std::span<const TrainingExample> batch,
                               const SpecialTokens& sp, ModelParams<T>& grad, Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw Error("gradients: empty batch");
    if (grad.config != p.config || grad.encoder.size() != p.encoder.size()) grad = ModelParams<T>::zeros(p.config);
    grad.set_zero();
    std::vector<DecoderSequence> seqs;
    seqs.reserve(batch.size());
    std::size_t total_tokens = 0;
    for (const auto& ex : batch) {
        seqs.push_back(decoder_sequence(ex, sp));
        total_tokens += seqs.back().labels.size();
    }
    const T scale = T(1) / static_cast<T>(total_tokens);
    T total = 0;
    Mat<T> dlogits;
    DecoderState<T> dec;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto enc = encode(p, batch[i].src_ids, sp.pad_id, dropout_rng);
        const Mat<T> logits = decode_logits(p, enc, seqs[i].input, sp.pad_id, dropout_rng, dec,
                                            static_cast<Eigen::Index>(kControlPrefixLen));
        auto [sum, count] = detail::nll_sum<T>(logits, seqs[i].labels, sp.pad_id, &dlogits, scale);
        if (!std::isfinite(static_cast<double>(sum))) {
            throw Error("gradients: non-finite loss on batch element " + std::to_string(i));
        }
        total += sum;
        backward(p, enc, dec, dlogits, grad);
    }
    return {total * scale, total_tokens};
}

struct ScheduleConfig {
    double init_lr = 1e-9;
    double peak_lr = 1e-3;
    std::int64_t warmup_steps = 16000;
    double decay_rate = 0.9999;

    void validate() const {
        if (!(init_lr > 0.0 && init_lr <= peak_lr)) throw Error("schedule: need 0 < init_lr <= peak_lr");
        if (warmup_steps <= 0) throw Error("schedule: warmup_steps must be positive");
        if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw Error("schedule: decay_rate must lie in (0, 1]");
    }

    static ScheduleConfig pretrain() { return {1e-9, 1e-3, 16000, 0.9999}; }
    static ScheduleConfig finetune() { return {1e-4, 1e-3, 500, 0.9999}; }
};

// Linear warmup from init_lr to peak_lr, then exponential decay per step.
inline double lr_at(const ScheduleConfig& s, std::int64_t step) {
    if (step < 0) throw Error("lr_at: negative step");
    if (step <= s.warmup_steps) {
        return s.init_lr + (s.peak_lr - s.init_lr) * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    return s.peak_lr * std::pow(s.decay_rate, static_cast<double>(step - s.warmup_steps));
}

struct RAdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
    std::int64_t step = 0;
    std::vector<Mat<T>> m;
    std::vector<Mat<T>> v;
    RAdamHyper hyper;

    static OptimizerState for_shapes(const std::vector<const Mat<T>*>& params, RAdamHyper h = {}) {
        if (!(h.beta1 > 0.0 && h.beta1 < 1.0 && h.beta2 > 0.0 && h.beta2 < 1.0)) {
            throw Error("radam: betas must lie in (0, 1)");
        }
        OptimizerState s;
        s.hyper = h;
        for (const auto* p : params) {
            s.m.push_back(Mat<T>::Zero(p->rows(), p->cols()));
            s.v.push_back(Mat<T>::Zero(p->rows(), p->cols()));
        }
        return s;
    }
    static OptimizerState for_model(const ModelParams<T>& p, RAdamHyper h = {}) { return for_shapes(p.tensors(), h); }
};

inline double radam_rho_inf(double beta2) { return 2.0 / (1.0 - beta2) - 1.0; }

inline double radam_rho(double beta2, std::int64_t t) {
    const double b2t = std::pow(beta2, static_cast<double>(t));
    return radam_rho_inf(beta2) - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
}

// Rectified Adam. With rho_t > 4 the adaptive step is scaled by the variance
// rectification term; otherwise a plain bias-corrected momentum step is taken.
// A non-finite gradient leaves params and state untouched.
template <typename T>
void radam_step(const std::vector<Mat<T>*>& params, const std::vector<const Mat<T>*>& grads, OptimizerState<T>& st,
                double lr) {
    if (params.size() != grads.size() || params.size() != st.m.size()) throw Error("radam: tensor count mismatch");
    if (!(lr >= 0.0)) throw Error("radam: negative learning rate");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i]->rows() != params[i]->rows() || grads[i]->cols() != params[i]->cols() ||
            st.m[i].rows() != params[i]->rows() || st.m[i].cols() != params[i]->cols()) {
            throw Error("radam: shape mismatch at tensor " + std::to_string(i));
        }
        if (!grads[i]->allFinite()) throw Error("radam: non-finite gradient in tensor " + std::to_string(i));
    }
    const auto& h = st.hyper;
    const std::int64_t t = st.step + 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    const double rho_inf = radam_rho_inf(h.beta2);
    const double rho_t = radam_rho(h.beta2, t);
    const bool rectified = rho_t > 4.0;
    double r = 0.0;
    if (rectified) {
        r = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = st.m[i];
        auto& v = st.v[i];
        const auto& g = *grads[i];
        m = b1 * m + (T(1) - b1) * g;
        v.array() = b2 * v.array() + (T(1) - b2) * g.array().square();
        if (rectified) {
            const T step = static_cast<T>(lr * r / bc1);
            params[i]->array() -=
                step * m.array() / ((v.array() / static_cast<T>(bc2)).sqrt() + static_cast<T>(h.eps));
        } else {
            params[i]->array() -= static_cast<T>(lr / bc1) * m.array();
        }
    }
    st.step = t;
}

template <typename T>
void radam_step(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& st, double lr) {
    radam_step<T>(params.tensors(), grads.tensors(), st, lr);
}

// Cycles over a fixed pool in shuffled epochs; each epoch reshuffles with a
// seed derived from (seed, epoch).
class ShuffledStream {
   public:
    ShuffledStream(std::vector<TrainingExample> pool, std::uint64_t seed) : pool_(std::move(pool)), seed_(seed) {
        if (pool_.empty()) throw Error("stream: empty example pool");
    }

    TrainingExample next() {
        if (pos_ >= order_.size()) {
            order_.resize(pool_.size());
            std::iota(order_.begin(), order_.end(), std::size_t{0});
            Rng rng(derive_seed(seed_, epoch_++));
            shuffle_in_place(order_, rng);
            pos_ = 0;
        }
        return pool_[order_[pos_++]];
    }

   private:
    std::vector<TrainingExample> pool_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::uint64_t epoch_ = 0;
};

using ExampleStream = std::function<TrainingExample()>;

struct BatchSpec {
    std::size_t max_tokens = 1024;  // source + decoder tokens per batch
    std::size_t max_examples = 64;
};

inline std::size_t example_tokens(const TrainingExample& ex) {
    return ex.src_ids.size() + ex.tgt_ids.size() + kControlPrefixLen + 2;
}

// Fills batches up to a token budget, holding back the example that would
// overflow it for the next batch. Every batch holds at least one example.
class Batcher {
   public:
    Batcher(ExampleStream stream, BatchSpec spec) : stream_(std::move(stream)), spec_(spec) {
        if (spec_.max_tokens == 0 || spec_.max_examples == 0) throw Error("batch spec: zero budget");
    }

    std::vector<TrainingExample> next() {
        std::vector<TrainingExample> batch;
        std::size_t tokens = 0;
        while (batch.size() < spec_.max_examples) {
            if (!pending_) pending_ = stream_();
            const std::size_t n = example_tokens(*pending_);
            if (!batch.empty() && tokens + n > spec_.max_tokens) break;
            tokens += n;
            batch.push_back(std::move(*pending_));
            pending_.reset();
        }
        return batch;
    }

   private:
    ExampleStream stream_;
    BatchSpec spec_;
    std::optional<TrainingExample> pending_;
};

struct StepMetrics {
    std::int64_t step = 0;
    std::array<int, kNumTasks> task_counts{};
    double loss = 0.0;
    double lr = 0.0;
    std::size_t tokens = 0;
    double wall_seconds = 0.0;
};

inline void write_metrics_line(std::ostream& os, const StepMetrics& m, bool include_time = true) {
    char buf[64];
    os << "{\"step\":" << m.step << ",\"tasks\":{";
    for (int t = 0; t < kNumTasks; ++t) {
        os << (t ? "," : "") << '"' << task_name(static_cast<Task>(t)) << "\":" << m.task_counts[static_cast<std::size_t>(t)];
    }
    std::snprintf(buf, sizeof buf, "%.17g", m.loss);
    os << "},\"loss\":" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", m.lr);
    os << ",\"lr\":" << buf << ",\"tokens\":" << m.tokens;
    if (include_time) {
        std::snprintf(buf, sizeof buf, "%.6f", m.wall_seconds);
        os << ",\"wall_time\":" << buf;
    }
    os << "}\n";
}

struct TrainOptions {
    std::uint64_t seed = 0;
    bool dropout = true;
    double clip_norm = 0.0;  // 0 disables clipping
    RAdamHyper hyper{};
    std::ostream* metrics_log = nullptr;
    bool log_wall_time = true;
};

template <typename T>
struct TrainResult {
    std::vector<StepMetrics> log;
    OptimizerState<T> optimizer;
};

// The shared pretrain/finetune loop: batch, forward, loss, backward, schedule,
// RAdam. `resume` continues from a saved optimizer state (its step also
// positions the schedule).
template <typename T>
TrainResult<T> run_training(ModelParams<T>& params, ExampleStream stream, const SpecialTokens& sp,
                            const ScheduleConfig& schedule, std::int64_t steps, const BatchSpec& batch_spec,
                            const TrainOptions& opts, std::optional<OptimizerState<T>> resume = std::nullopt) {
    schedule.validate();
    if (steps < 0) throw Error("training: negative step count");
    TrainResult<T> result;
    result.optimizer = resume ? std::move(*resume) : OptimizerState<T>::for_model(params, opts.hyper);
    if (steps == 0) return result;
    Batcher batcher(std::move(stream), batch_spec);
    const std::uint64_t dropout_seed = derive_seed(opts.seed, "dropout");
    ModelParams<T> grad = ModelParams<T>::zeros(params.config);
    const auto start = std::chrono::steady_clock::now();
    for (std::int64_t i = 0; i < steps; ++i) {
        const std::int64_t step = result.optimizer.step;
        try {
            const auto batch = batcher.next();
            StepMetrics m;
            m.step = step;
            for (const auto& ex : batch) ++m.task_counts[static_cast<std::size_t>(ex.task)];
            // Keyed by step so a resumed run draws the same masks.
            Rng dropout_rng(derive_seed(dropout_seed, static_cast<std::uint64_t>(step)));
            const auto lv = compute_gradients<T>(params, batch, sp, grad, opts.dropout ? &dropout_rng : nullptr);
            if (opts.clip_norm > 0.0) {
                double sq = 0.0;
                grad.for_each([&](const std::string&, const Mat<T>& g) { sq += static_cast<double>(g.squaredNorm()); });
                const double norm = std::sqrt(sq);
                if (norm > opts.clip_norm) {
                    const T s = static_cast<T>(opts.clip_norm / norm);
                    grad.for_each([&](const std::string&, Mat<T>& g) { g *= s; });
                }
            }
            m.lr = lr_at(schedule, step);
            radam_step(params, grad, result.optimizer, m.lr);
            m.loss = static_cast<double>(lv.loss);
            m.tokens = lv.tokens;
            m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            if (opts.metrics_log) write_metrics_line(*opts.metrics_log, m, opts.log_wall_time);
            result.log.push_back(m);
        } catch (const Error& e) {
            throw Error("training step " + std::to_string(step) + ": " + e.what());
        }
    }
    return result;
}

}  // namespace mixling
