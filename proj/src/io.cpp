#include "dladiff/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dladiff {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'D', 'L', 'A', 'D', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("checkpoint truncated");
    return v;
}
std::string get_str(std::istream& is) {
    const std::uint32_t n = get_u32(is);
    if (n > (1u << 24)) throw FormatError("checkpoint string length implausible");
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw FormatError("checkpoint truncated");
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kMagic, 8);
    put_u32(os, Checkpoint::kSchemaVersion);
    put_u32(os, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        put_str(os, k);
        put_str(os, v);
    }
    put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_str(os, name);
        put_u32(os, static_cast<std::uint32_t>(t.ndim()));
        for (int d : t.shape()) os.write(reinterpret_cast<const char*>(&d), 4);
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw FormatError("bad checkpoint magic: " + path.string());
    const std::uint32_t version = get_u32(is);
    if (version != Checkpoint::kSchemaVersion)
        throw FormatError("unsupported checkpoint schema version " + std::to_string(version));
    Checkpoint ck;
    const std::uint32_t nm = get_u32(is);
    for (std::uint32_t i = 0; i < nm; ++i) {
        std::string k = get_str(is);
        ck.meta[k] = get_str(is);
    }
    const std::uint32_t nt = get_u32(is);
    for (std::uint32_t i = 0; i < nt; ++i) {
        std::string name = get_str(is);
        const std::uint32_t nd = get_u32(is);
        if (nd > 8) throw FormatError("tensor rank implausible in " + name);
        Shape s(nd);
        for (auto& d : s)
            if (!is.read(reinterpret_cast<char*>(&d), 4)) throw FormatError("checkpoint truncated");
        Tensor t(s);
        if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
            throw FormatError("checkpoint truncated in " + name);
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    return ck;
}

std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

void KeyValueText::set(const std::string& key, const std::string& value) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
        throw ParameterError("key/value text cannot contain '=' in keys or newlines: " + key);
    for (auto& [k, v] : entries_)
        if (k == key) {
            v = value;
            return;
        }
    entries_.emplace_back(key, value);
}

void KeyValueText::set(const std::string& key, double value) { set(key, format_double(value)); }
void KeyValueText::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

bool KeyValueText::has(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return true;
    return false;
}

const std::string& KeyValueText::get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    throw FormatError("missing key: " + key);
}

double KeyValueText::get_double(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw FormatError("not a number for " + key + ": " + s);
        return v;
    } catch (const std::logic_error&) {
        throw FormatError("not a number for " + key + ": " + s);
    }
}

std::string KeyValueText::str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
}

KeyValueText KeyValueText::parse(const std::string& text) {
    KeyValueText kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw FormatError("line " + std::to_string(lineno) + ": expected key = value");
        kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
}

void KeyValueText::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << str();
}

KeyValueText KeyValueText::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string to_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    return to_hex(h);
}

}  // namespace dladiff
