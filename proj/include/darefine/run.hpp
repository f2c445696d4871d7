#ifndef DAREFINE_RUN_HPP
#define DAREFINE_RUN_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "tensor.hpp"

namespace darefine {

inline std::string sha1_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr)) throw std::runtime_error("SHA-1 digest failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

/// Object id git assigns to a blob with this content.
inline std::string git_blob_hash(std::string_view content) {
    std::string framed = "blob " + std::to_string(content.size());
    framed.push_back('\0');
    framed.append(content);
    return sha1_hex(framed);
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw InputError("cannot read " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    const auto tmp = p.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw InputError("cannot write " + p.string());
        os << content;
        if (!os) throw InputError("short write on " + p.string());
    }
    std::filesystem::rename(tmp, p);
}

/// Record of one CLI invocation, written as `run.json` in the run directory.
struct RunManifest {
    std::string run_id;
    std::string command;
    std::uint64_t seed = 0;
    nlohmann::ordered_json config;
    std::map<std::string, std::string> inputs;  // label -> git blob hash
    std::vector<std::string> artifacts;         // paths relative to the run directory

    /// Git-style hash over the config snapshot, the seed and every input hash.
    std::string input_hash() const {
        std::string s = command + "\n" + std::to_string(seed) + "\n" + config.dump() + "\n";
        for (const auto& [k, v] : inputs) s += k + " " + v + "\n";
        return git_blob_hash(s);
    }

    /// `<command>-<first 12 hex digits of input_hash>`; identical invocations share a run id.
    std::string make_run_id() const { return command + "-" + input_hash().substr(0, 12); }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json in = nlohmann::ordered_json::object();
        for (const auto& [k, v] : inputs) in[k] = v;
        return {{"run_id", run_id}, {"command", command},       {"seed", seed},          {"config", config},
                {"inputs", in},     {"input_hash", input_hash()}, {"artifacts", artifacts}};
    }

    /// Writes run.json after checking that every listed artifact exists.
    void save(const std::filesystem::path& run_dir) const {
        for (const auto& a : artifacts)
            if (!std::filesystem::exists(run_dir / a)) throw std::runtime_error("artifact " + a + " was not produced");
        write_file(run_dir / "run.json", to_json().dump(2) + "\n");
    }
};

}  // namespace darefine

#endif
