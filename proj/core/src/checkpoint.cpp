#include "ucam/checkpoint.hpp"

#include <fstream>
#include <map>

#include "ucam/binary_io.hpp"
#include "ucam/error.hpp"

namespace ucam {

const Tensor<float>* Checkpoint::extra(const std::string& name) const {
    for (const auto& [n, t] : extras) {
        if (n == name) return &t;
    }
    return nullptr;
}

namespace {

void write_tensor(binary::Writer& w, const std::string& name, const Tensor<float>& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t.data().data(), t.numel());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto named = ckpt.params.named();
    Json header = {{"model", to_json(ckpt.config)},
                   {"step", ckpt.step},
                   {"tensor_count", named.size() + ckpt.extras.size()},
                   {"meta", ckpt.meta}};
    // write next to the target, then rename over it
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        binary::Writer w(os);
        w.bytes("UCAM", 4);
        w.u32(kCheckpointVersion);
        w.str(header.dump());
        for (const auto& [name, t] : named) write_tensor(w, name, t);
        for (const auto& [name, t] : ckpt.extras) write_tensor(w, name, t);
        os.flush();
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    binary::Reader r(is, path.string());
    r.magic("UCAM");
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw VersionMismatchError(path.string() + ": checkpoint format version " + std::to_string(version) +
                                   ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    Json header;
    try {
        header = Json::parse(r.str());
    } catch (const Json::parse_error& e) {
        throw PayloadError(path.string() + ": header is not valid JSON: " + e.what());
    }
    if (!header.is_object() || !header.contains("model") || !header.contains("step") ||
        !header.contains("tensor_count")) {
        throw PayloadError(path.string() + ": header lacks model, step or tensor_count");
    }

    Checkpoint ckpt;
    try {
        ckpt.config = model_config_from_json(header["model"]);
        ckpt.config.validate();
        ckpt.step = header["step"].get<std::uint64_t>();
    } catch (const ConfigError& e) {
        throw PayloadError(path.string() + ": stored config is invalid: " + e.what());
    } catch (const Json::exception& e) {
        throw PayloadError(path.string() + ": " + e.what());
    }
    if (header.contains("meta")) ckpt.meta = header["meta"];

    const auto count = header["tensor_count"].get<std::size_t>();
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
    tensors.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto name = r.str(4096);
        const auto rank = r.u32();
        if (rank > 8) throw PayloadError(path.string() + ": tensor '" + name + "' has implausible rank");
        Shape shape(rank);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = r.u32();
            numel *= d;
        }
        if (numel > (std::size_t{1} << 32)) throw PayloadError(path.string() + ": tensor '" + name + "' too large");
        std::vector<float> values(numel);
        r.f32s(values.data(), numel);
        tensors.emplace_back(std::move(name), Tensor<float>::from(std::move(shape), std::move(values)));
    }
    if (!r.at_end()) throw PayloadError(path.string() + ": trailing bytes after the last tensor");

    // Model tensors come first, in named() order of the stored config.
    ckpt.params = init_model_params<float>(ckpt.config, 0);
    auto expected = ckpt.params.named();
    if (tensors.size() < expected.size()) {
        throw StructureError(path.string() + ": missing parameter '" + expected[tensors.size()].first + "'");
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& [name, t] = tensors[i];
        if (name != expected[i].first) {
            throw StructureError(path.string() + ": expected parameter '" + expected[i].first + "', found '" + name +
                                 "'");
        }
        if (t.shape() != expected[i].second.shape()) {
            throw StructureError(path.string() + ": parameter '" + name + "' has shape " + shape_str(t.shape()) +
                                 ", config implies " + shape_str(expected[i].second.shape()));
        }
        auto src = t.data();
        std::copy(src.begin(), src.end(), expected[i].second.data_mut().begin());
    }
    for (std::size_t i = expected.size(); i < tensors.size(); ++i) ckpt.extras.push_back(std::move(tensors[i]));
    return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const AcousticModelConfig& expected) {
    auto ckpt = load_checkpoint(path);
    const Json stored = to_json(ckpt.config);
    const Json wanted = to_json(expected);
    for (auto it = wanted.begin(); it != wanted.end(); ++it) {
        if (stored[it.key()] != it.value()) {
            throw StructureError(path.string() + ": checkpoint has model." + it.key() + " = " +
                                 stored[it.key()].dump() + ", expected " + it.value().dump());
        }
    }
    validate_params(ckpt.params, expected);
    return ckpt;
}

}  // namespace ucam
