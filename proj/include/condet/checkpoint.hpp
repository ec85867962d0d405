// Versioned binary checkpoint: config echo, online and EMA parameter
// tensors, iteration counter. Writes are atomic (temp file + rename).
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "condet/config.hpp"
#include "condet/decoder.hpp"

namespace condet {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'C', 'D', 'E', 'T'};

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

inline void write_params(std::ostream& os, const nn::ParamStoreT<float>& store) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(store.params.size()));
    for (const auto& [name, t] : store.params) {
        write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint32_t>(os, static_cast<uint32_t>(t.rows()));
        write_pod<uint32_t>(os, static_cast<uint32_t>(t.cols()));
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
}

inline void read_params(std::istream& is, nn::ParamStoreT<float>& store) {
    uint32_t count = read_pod<uint32_t>(is);
    if (count != store.params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    for (auto& [name, t] : store.params) {
        uint16_t len = read_pod<uint16_t>(is);
        std::string got(len, '\0');
        is.read(got.data(), len);
        if (got != name) throw std::runtime_error("checkpoint: parameter order mismatch at '" + got + "'");
        uint32_t rows = read_pod<uint32_t>(is), cols = read_pod<uint32_t>(is);
        if (rows != static_cast<uint32_t>(t.rows()) || cols != static_cast<uint32_t>(t.cols()))
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
    }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const DetectorModel& model,
                            const DetectorModel& ema_model, int64_t iteration) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
        os.write(kCheckpointMagic, 4);
        detail::write_pod<uint32_t>(os, kCheckpointVersion);
        std::string cfg_json = config_to_json(cfg).dump();
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(cfg_json.size()));
        os.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
        detail::write_pod<int64_t>(os, iteration);
        detail::write_params(os, model.params());
        detail::write_params(os, ema_model.params());
        if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

struct Checkpoint {
    RunConfig config;
    int64_t iteration = 0;
    std::shared_ptr<DetectorModel> model;
    std::shared_ptr<DetectorModel> ema_model;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t version = detail::read_pod<uint32_t>(is);
    if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
    uint32_t len = detail::read_pod<uint32_t>(is);
    std::string cfg_json(len, '\0');
    is.read(cfg_json.data(), len);
    if (!is) throw std::runtime_error("checkpoint: truncated config");
    Checkpoint ck;
    ck.config = parse_config(json::parse(cfg_json));
    ck.iteration = detail::read_pod<int64_t>(is);
    ck.model = std::make_shared<DetectorModel>(ck.config.model, ck.config.schedule, /*init_seed=*/0);
    ck.ema_model = std::make_shared<DetectorModel>(ck.config.model, ck.config.schedule, /*init_seed=*/0);
    detail::read_params(is, ck.model->params());
    detail::read_params(is, ck.ema_model->params());
    return ck;
}

}  // namespace condet
