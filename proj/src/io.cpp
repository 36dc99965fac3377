#include "avattr/io.hpp"

#include <nlohmann/json.hpp>
#include <fstream>

namespace avattr::io {

namespace {
std::filesystem::path meta_path(const std::filesystem::path& bin_path) {
    return bin_path.string() + ".meta.json";
}
}  // namespace

void write_array(const std::filesystem::path& bin_path, const Tensor<float>& t, const json& extra_meta) {
    std::ofstream f(bin_path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + bin_path.string());
    f.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) throw std::runtime_error("short write to " + bin_path.string());

    json meta = extra_meta.is_object() ? extra_meta : json::object();
    meta["dtype"] = "float32";
    meta["byte_order"] = "little";
    meta["shape"] = t.shape;
    write_json(meta_path(bin_path), meta);
}

Tensor<float> read_array(const std::filesystem::path& bin_path, json* meta_out) {
    json meta = read_json(meta_path(bin_path));
    if (meta.value("dtype", "") != "float32" || meta.value("byte_order", "") != "little")
        throw std::runtime_error("unsupported array encoding in " + meta_path(bin_path).string());
    Shape shape = meta.at("shape").get<Shape>();

    std::ifstream f(bin_path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + bin_path.string());
    Tensor<float> t(shape);
    f.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(float)))
        throw std::runtime_error("truncated array file " + bin_path.string());
    if (meta_out) *meta_out = std::move(meta);
    return t;
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::vector<json> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(json::parse(line));
    }
    return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    for (const auto& r : records) f << r.dump() << "\n";
}

json read_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return json::parse(f);
}

void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << content;
}

}  // namespace avattr::io

