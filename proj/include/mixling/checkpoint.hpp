#pragma once

// Checkpoint container:
//
//   "MIXLCKPT"                  8-byte magic
//   u32 version
//   u64 header length, header   JSON: kind, dtype, model config, tensor count,
//                               optimizer step and hyperparameters when present
//   per tensor:                 u32 name length, name, u64 rows, u64 cols,
//                               rows*cols little-endian IEEE values
//   u64 checksum                FNV-1a over every preceding byte
//
// All integers are little-endian regardless of host order.

#include "mixling/model.hpp"
#include "mixling/training.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mixling {

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"num_layers", c.num_layers}, {"num_heads", c.num_heads},   {"d_model", c.d_model},
            {"d_ff", c.d_ff},             {"dropout", c.dropout},       {"vocab_size", c.vocab_size},
            {"max_positions", c.max_positions}, {"tie_embeddings", c.tie_embeddings}};
}

inline ModelConfig config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.dropout = j.value("dropout", c.dropout);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    return c;
}

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'X', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class ChecksumWriter {
   public:
    explicit ChecksumWriter(std::ostream& os) : os_(os) {}

    void bytes(const void* p, std::size_t n) {
        os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        hash_ = fnv1a(p, n, hash_);
    }
    template <typename U>
    void le(U value) {
        static_assert(std::is_integral_v<U>);
        unsigned char buf[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(value) >> (8 * i));
        bytes(buf, sizeof buf);
    }
    template <typename F>
    void le_float(F value) {
        if constexpr (sizeof(F) == 4) {
            le(std::bit_cast<std::uint32_t>(value));
        } else {
            le(std::bit_cast<std::uint64_t>(value));
        }
    }
    std::uint64_t hash() const { return hash_; }

   private:
    std::ostream& os_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

class ChecksumReader {
   public:
    explicit ChecksumReader(std::istream& is) : is_(is) {}

    void bytes(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) throw Error("checkpoint: truncated file");
        hash_ = fnv1a(p, n, hash_);
    }
    template <typename U>
    U le() {
        unsigned char buf[sizeof(U)];
        bytes(buf, sizeof buf);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return static_cast<U>(v);
    }
    template <typename F>
    F le_float() {
        if constexpr (sizeof(F) == 4) {
            return std::bit_cast<F>(le<std::uint32_t>());
        } else {
            return std::bit_cast<F>(le<std::uint64_t>());
        }
    }
    std::uint64_t hash() const { return hash_; }

   private:
    std::istream& is_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

template <typename T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "f32" : "f64";
}

struct NamedTensor {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<double> values;
};

struct Container {
    nlohmann::json header;
    std::vector<NamedTensor> tensors;
};

template <typename T>
void write_container(std::ostream& os, nlohmann::json header,
                     const std::vector<std::pair<std::string, const Mat<T>*>>& tensors) {
    header["dtype"] = dtype_name<T>();
    header["tensors"] = tensors.size();
    const std::string text = header.dump();
    ChecksumWriter w(os);
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.le<std::uint32_t>(kCheckpointVersion);
    w.le<std::uint64_t>(text.size());
    w.bytes(text.data(), text.size());
    for (const auto& [name, m] : tensors) {
        w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.le<std::uint64_t>(static_cast<std::uint64_t>(m->rows()));
        w.le<std::uint64_t>(static_cast<std::uint64_t>(m->cols()));
        for (Eigen::Index i = 0; i < m->size(); ++i) w.le_float<T>(m->data()[i]);
    }
    const std::uint64_t sum = w.hash();
    w.le<std::uint64_t>(sum);
    if (!os) throw Error("checkpoint: write failed");
}

inline Container read_container(std::istream& is) {
    ChecksumReader r(is);
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw Error("checkpoint: bad magic");
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
    const auto header_len = r.le<std::uint64_t>();
    if (header_len > (1u << 24)) throw Error("checkpoint: implausible header length");
    std::string text(header_len, '\0');
    r.bytes(text.data(), text.size());
    Container c;
    try {
        c.header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("checkpoint: malformed header: ") + e.what());
    }
    const std::string dtype = c.header.at("dtype").get<std::string>();
    if (dtype != "f32" && dtype != "f64") throw Error("checkpoint: unknown dtype " + dtype);
    const std::size_t count = c.header.at("tensors").get<std::size_t>();
    for (std::size_t t = 0; t < count; ++t) {
        NamedTensor nt;
        const auto name_len = r.le<std::uint32_t>();
        if (name_len > 4096) throw Error("checkpoint: implausible tensor name length");
        nt.name.resize(name_len);
        r.bytes(nt.name.data(), name_len);
        nt.rows = static_cast<Eigen::Index>(r.le<std::uint64_t>());
        nt.cols = static_cast<Eigen::Index>(r.le<std::uint64_t>());
        if (nt.rows < 0 || nt.cols < 0 || nt.rows * nt.cols > (Eigen::Index{1} << 32)) {
            throw Error("checkpoint: implausible shape for " + nt.name);
        }
        nt.values.resize(static_cast<std::size_t>(nt.rows * nt.cols));
        for (auto& v : nt.values) v = dtype == "f32" ? static_cast<double>(r.le_float<float>()) : r.le_float<double>();
        c.tensors.push_back(std::move(nt));
    }
    const std::uint64_t expected = r.hash();
    const auto stored = r.le<std::uint64_t>();
    if (stored != expected) throw Error("checkpoint: checksum mismatch");
    return c;
}

template <typename T>
void fill_from(std::vector<std::pair<std::string, Mat<T>*>>& targets, const Container& c, const std::string& prefix) {
    if (c.tensors.size() != targets.size()) throw Error("checkpoint: tensor count does not match the configuration");
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& src = c.tensors[i];
        auto& [name, dst] = targets[i];
        if (src.name != prefix + name) throw Error("checkpoint: expected tensor " + prefix + name + ", found " + src.name);
        if (src.rows != dst->rows() || src.cols != dst->cols()) {
            throw Error("checkpoint: shape mismatch for " + src.name + ": file has " + std::to_string(src.rows) + "x" +
                        std::to_string(src.cols) + ", config implies " + std::to_string(dst->rows()) + "x" +
                        std::to_string(dst->cols()));
        }
        for (Eigen::Index k = 0; k < dst->size(); ++k) dst->data()[k] = static_cast<T>(src.values[static_cast<std::size_t>(k)]);
    }
}

}  // namespace detail

template <typename T>
void save_checkpoint(std::ostream& os, const ModelParams<T>& p) {
    std::vector<std::pair<std::string, const Mat<T>*>> tensors;
    p.for_each([&](const std::string& n, const Mat<T>& m) { tensors.emplace_back(n, &m); });
    detail::write_container<T>(os, {{"kind", "model"}, {"config", config_to_json(p.config)}}, tensors);
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelParams<T>& p) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write checkpoint " + path);
    save_checkpoint(f, p);
}

template <typename T>
ModelParams<T> load_checkpoint(std::istream& is) {
    const auto c = detail::read_container(is);
    if (c.header.value("kind", "") != "model") throw Error("checkpoint: not a model checkpoint");
    const ModelConfig config = config_from_json(c.header.at("config"));
    auto p = ModelParams<T>::zeros(config);
    std::vector<std::pair<std::string, Mat<T>*>> targets;
    p.for_each([&](const std::string& n, Mat<T>& m) { targets.emplace_back(n, &m); });
    detail::fill_from<T>(targets, c, "");
    return p;
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint " + path);
    return load_checkpoint<T>(f);
}

// Optimizer state for resuming; tensor names mirror the model's with m/ and v/.
template <typename T>
void save_optimizer(std::ostream& os, const ModelParams<T>& layout, const OptimizerState<T>& st) {
    std::vector<std::string> names;
    layout.for_each([&](const std::string& n, const Mat<T>&) { names.push_back(n); });
    if (names.size() != st.m.size()) throw Error("optimizer state does not match the model layout");
    std::vector<std::pair<std::string, const Mat<T>*>> tensors;
    for (std::size_t i = 0; i < names.size(); ++i) tensors.emplace_back("m/" + names[i], &st.m[i]);
    for (std::size_t i = 0; i < names.size(); ++i) tensors.emplace_back("v/" + names[i], &st.v[i]);
    nlohmann::json header = {{"kind", "optimizer"},
                             {"config", config_to_json(layout.config)},
                             {"step", st.step},
                             {"beta1", st.hyper.beta1},
                             {"beta2", st.hyper.beta2},
                             {"eps", st.hyper.eps}};
    detail::write_container<T>(os, std::move(header), tensors);
}

template <typename T>
OptimizerState<T> load_optimizer(std::istream& is, const ModelParams<T>& layout) {
    const auto c = detail::read_container(is);
    if (c.header.value("kind", "") != "optimizer") throw Error("checkpoint: not an optimizer state");
    if (config_from_json(c.header.at("config")) != layout.config) throw Error("optimizer state: model config differs");
    auto st = OptimizerState<T>::for_model(layout, {c.header.at("beta1").get<double>(), c.header.at("beta2").get<double>(),
                                                    c.header.at("eps").get<double>()});
    st.step = c.header.at("step").get<std::int64_t>();
    std::vector<std::pair<std::string, Mat<T>*>> targets;
    std::size_t i = 0;
    layout.for_each([&](const std::string& n, const Mat<T>&) { targets.emplace_back("m/" + n, &st.m[i++]); });
    i = 0;
    layout.for_each([&](const std::string& n, const Mat<T>&) { targets.emplace_back("v/" + n, &st.v[i++]); });
    detail::fill_from<T>(targets, c, "");
    return st;
}

}  // namespace mixling
