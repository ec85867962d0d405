// Reproducibility manifest: config echo, source revision, seed, timestamps
// and produced artifacts. Written atomically at run start, finalized at end.
#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "condet/config.hpp"

#ifndef CONDET_REVISION
#define CONDET_REVISION "unknown"
#endif

namespace condet {

inline std::string iso8601_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
    return buf;
}

class RunManifest {
public:
    RunManifest(std::string out_dir, std::string command, const json& config_echo, uint64_t seed)
        : path_((std::filesystem::path(out_dir) / "manifest.json").string()) {
        std::filesystem::create_directories(out_dir);
        doc_["command"] = std::move(command);
        doc_["revision"] = CONDET_REVISION;
        doc_["seed"] = seed;
        doc_["config"] = config_echo;
        doc_["started_at"] = iso8601_now();
        doc_["status"] = "running";
        doc_["artifacts"] = json::array();
        flush();
    }

    void add_artifact(const std::string& p) {
        doc_["artifacts"].push_back(p);
        flush();
    }

    void finalize(bool ok) {
        doc_["finished_at"] = iso8601_now();
        doc_["status"] = ok ? "complete" : "failed";
        flush();
    }

private:
    void flush() const {
        std::string tmp = path_ + ".tmp";
        {
            std::ofstream f(tmp);
            f << doc_.dump(2) << "\n";
        }
        std::filesystem::rename(tmp, path_);
    }

    std::string path_;
    json doc_;
};

}  // namespace condet
