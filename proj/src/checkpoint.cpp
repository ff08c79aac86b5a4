#include "itarflow/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

namespace itarflow {

uint32_t crc32_bytes(const uint8_t* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace {

void put_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32le(const uint8_t* p) {
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

void put_f32le(std::string& out, const std::vector<float>& v) {
    for (float f : v) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32le(out, bits);
    }
}

std::string shape_csv(const Shape& s) {
    std::ostringstream os;
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    return os.str();
}

Shape parse_shape_csv(const std::string& s) {
    Shape out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) out.push_back(std::stoll(part));
    return out;
}

}  // namespace

void checkpoint_save(const FlowStack& model, const OptimizerState& state, const RunConfig& cfg,
                     const std::string& path) {
    auto params = model.named_parameters();
    std::string config_text = serialize_config(cfg);
    int64_t config_lines = std::count(config_text.begin(), config_text.end(), '\n');

    std::ostringstream manifest;
    manifest << "step " << state.step_count << "\n";
    const ArchSpec& a = model.arch;
    manifest << "arch " << a.num_tokens << " " << a.token_dim << " " << a.width << " " << a.heads
             << " " << a.time_dim << " " << a.num_classes << " ";
    for (size_t i = 0; i < a.block_layers.size(); ++i)
        manifest << (i ? "," : "") << a.block_layers[i];
    manifest << "\n";
    manifest << "config_lines " << config_lines << "\n" << config_text;

    std::string payload;
    for (const auto& [name, t] : params) {
        manifest << "tensor " << name << " f32 " << shape_csv(t.shape()) << "\n";
        put_f32le(payload, t.values());
    }
    if (!state.m.empty()) {
        if (state.m.size() != params.size() || state.v.size() != params.size())
            throw CheckpointError(CheckpointError::Code::manifest_mismatch,
                                  path + ": optimizer state does not match parameter count");
        for (size_t i = 0; i < params.size(); ++i) {
            manifest << "opt_m " << params[i].first << " f32 " << shape_csv(params[i].second.shape())
                     << "\n";
            put_f32le(payload, state.m[i]);
        }
        for (size_t i = 0; i < params.size(); ++i) {
            manifest << "opt_v " << params[i].first << " f32 " << shape_csv(params[i].second.shape())
                     << "\n";
            put_f32le(payload, state.v[i]);
        }
    }

    std::string mtext = manifest.str();
    std::string file;
    file += "ITAR";
    put_u32le(file, kCheckpointVersion);
    put_u32le(file, static_cast<uint32_t>(mtext.size()));
    file += mtext;
    file += payload;
    put_u32le(file, crc32_bytes(reinterpret_cast<const uint8_t*>(payload.data()), payload.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointError::Code::io, path + ": cannot open for writing");
    out.write(file.data(), file.size());
    if (!out) throw CheckpointError(CheckpointError::Code::io, path + ": write failed");
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Code::io, path + ": cannot open");
    std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const uint8_t* p = reinterpret_cast<const uint8_t*>(file.data());
    size_t size = file.size();

    if (size < 12) throw CheckpointError(CheckpointError::Code::truncated, path + ": file too short");
    if (std::memcmp(p, "ITAR", 4) != 0)
        throw CheckpointError(CheckpointError::Code::bad_magic, path + ": bad magic");
    uint32_t version = get_u32le(p + 4);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Code::version_mismatch,
                              path + ": format version " + std::to_string(version) +
                                  ", expected " + std::to_string(kCheckpointVersion));
    uint32_t mlen = get_u32le(p + 8);
    if (size < 12 + static_cast<size_t>(mlen) + 4)
        throw CheckpointError(CheckpointError::Code::truncated, path + ": truncated manifest");
    std::string mtext(file.data() + 12, mlen);

    // parse the manifest
    int64_t step = 0;
    ArchSpec arch;
    bool have_arch = false;
    std::string config_text;
    struct Entry {
        int kind;  // 0 tensor, 1 opt_m, 2 opt_v
        std::string name;
        Shape shape;
    };
    std::vector<Entry> entries;
    {
        std::istringstream ms(mtext);
        std::string line;
        while (std::getline(ms, line)) {
            std::istringstream ls(line);
            std::string tag;
            ls >> tag;
            if (tag == "step") {
                ls >> step;
            } else if (tag == "arch") {
                std::string layers;
                ls >> arch.num_tokens >> arch.token_dim >> arch.width >> arch.heads >>
                    arch.time_dim >> arch.num_classes >> layers;
                arch.block_layers.clear();
                std::stringstream lss(layers);
                std::string part;
                while (std::getline(lss, part, ',')) arch.block_layers.push_back(std::stoi(part));
                have_arch = true;
            } else if (tag == "config_lines") {
                int64_t k = 0;
                ls >> k;
                std::string cline;
                for (int64_t i = 0; i < k && std::getline(ms, cline); ++i)
                    config_text += cline + "\n";
            } else if (tag == "tensor" || tag == "opt_m" || tag == "opt_v") {
                Entry e;
                e.kind = tag == "tensor" ? 0 : (tag == "opt_m" ? 1 : 2);
                std::string dtype, shp;
                ls >> e.name >> dtype >> shp;
                if (dtype != "f32")
                    throw CheckpointError(CheckpointError::Code::manifest_mismatch,
                                          path + ": unsupported dtype '" + dtype + "'");
                e.shape = parse_shape_csv(shp);
                entries.push_back(std::move(e));
            } else if (!tag.empty()) {
                throw CheckpointError(CheckpointError::Code::manifest_mismatch,
                                      path + ": unknown manifest entry '" + tag + "'");
            }
        }
    }
    if (!have_arch)
        throw CheckpointError(CheckpointError::Code::manifest_mismatch, path + ": missing arch");

    size_t payload_len = 0;
    for (const auto& e : entries) payload_len += static_cast<size_t>(shape_numel(e.shape)) * 4;
    if (size != 12 + mlen + payload_len + 4)
        throw CheckpointError(CheckpointError::Code::truncated,
                              path + ": payload length does not match manifest");
    const uint8_t* payload = p + 12 + mlen;
    uint32_t stored_crc = get_u32le(payload + payload_len);
    uint32_t actual_crc = crc32_bytes(payload, payload_len);
    if (stored_crc != actual_crc)
        throw CheckpointError(CheckpointError::Code::crc_mismatch,
                              path + ": payload CRC mismatch (corrupted file)");

    LoadedCheckpoint out{FlowStack::init(arch, 0), OptimizerState{}, RunConfig{}, step};
    out.config = parse_config_text(config_text, path + " (embedded config)");
    out.state.step_count = step;

    auto params = out.model.named_parameters();
    size_t param_idx = 0, off = 0;
    auto read_block = [&](const Entry& e) {
        std::vector<float> v(shape_numel(e.shape));
        for (size_t i = 0; i < v.size(); ++i) {
            uint32_t bits = get_u32le(payload + off + i * 4);
            std::memcpy(&v[i], &bits, 4);
        }
        off += v.size() * 4;
        return v;
    };
    for (const auto& e : entries) {
        if (e.kind == 0) {
            if (param_idx >= params.size() || params[param_idx].first != e.name ||
                params[param_idx].second.shape() != e.shape)
                throw CheckpointError(CheckpointError::Code::manifest_mismatch,
                                      path + ": tensor '" + e.name + "' does not match the model");
            params[param_idx].second.data() = read_block(e);
            ++param_idx;
        } else if (e.kind == 1) {
            out.state.m.push_back(read_block(e));
        } else {
            out.state.v.push_back(read_block(e));
        }
    }
    if (param_idx != params.size())
        throw CheckpointError(CheckpointError::Code::manifest_mismatch,
                              path + ": manifest lists " + std::to_string(param_idx) +
                                  " tensors, model has " + std::to_string(params.size()));
    return out;
}

}  // namespace itarflow
