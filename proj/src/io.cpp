#include "uqseg/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace uqseg::io {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'U', 'Q', 'T', '1'};

template <typename U>
void put_le(std::ostream& os, U v)
{
    char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const std::string& source)
{
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U)))
        throw std::runtime_error(source + ": truncated UQT record");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
    return v;
}

std::ifstream open_in(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path.string() + ": cannot open for reading");
    return in;
}

std::ofstream open_out(const fs::path& path)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    return out;
}

std::vector<std::string> split(const std::string& line, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

} // namespace

void write_uqt(std::ostream& os, const Tensor& t, DType dtype)
{
    if (t.ndim() > 255) throw std::invalid_argument("UQT: too many dimensions");
    os.write(kMagic, 4);
    os.put(static_cast<char>(dtype));
    os.put(static_cast<char>(t.ndim()));
    for (std::size_t d : t.shape()) {
        if (d > 0xFFFFFFFFULL) throw std::invalid_argument("UQT: dimension exceeds u32");
        put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    }
    if (dtype == DType::f32) {
        for (double v : t.values()) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
        for (double v : t.values()) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
}

Tensor read_uqt(std::istream& is, const std::string& source)
{
    char magic[4];
    if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
        throw std::runtime_error(source + ": not a UQT1 tensor (bad magic)");
    const int dtype = is.get();
    const int ndim = is.get();
    if (dtype != 0 && dtype != 1) throw std::runtime_error(source + ": unknown UQT dtype code");
    if (ndim < 0) throw std::runtime_error(source + ": truncated UQT header");
    Shape shape(static_cast<std::size_t>(ndim));
    for (auto& d : shape) d = get_le<std::uint32_t>(is, source);
    std::vector<double> values(numel(shape));
    if (dtype == 0) {
        for (double& v : values) v = std::bit_cast<float>(get_le<std::uint32_t>(is, source));
    } else {
        for (double& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(is, source));
    }
    return Tensor(std::move(shape), std::move(values));
}

void save_uqt(const fs::path& path, const Tensor& t, DType dtype)
{
    auto out = open_out(path);
    write_uqt(out, t, dtype);
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

Tensor load_uqt(const fs::path& path)
{
    auto in = open_in(path);
    Tensor t = read_uqt(in, path.string());
    if (in.peek() != std::char_traits<char>::eof())
        throw std::runtime_error(path.string() + ": trailing bytes after UQT payload");
    return t;
}

const std::string& ModelFile::get(const std::string& key) const
{
    for (const auto& [k, v] : header)
        if (k == key) return v;
    throw std::runtime_error(source + ": model header has no '" + key + "' entry");
}

std::size_t ModelFile::get_size(const std::string& key) const
{
    return parse_size(get(key), source);
}

std::vector<std::string> ModelFile::get_all(const std::string& key) const
{
    std::vector<std::string> out;
    for (const auto& [k, v] : header)
        if (k == key) out.push_back(v);
    return out;
}

void save_model(const fs::path& path, const ModelFile& model)
{
    auto out = open_out(path);
    out << "uqseg-model 1\n";
    for (const auto& [k, v] : model.header) out << k << ' ' << v << '\n';
    out << "tensors " << model.tensors.size() << '\n' << "end\n";
    for (const Tensor& t : model.tensors) write_uqt(out, t, DType::f64);
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

ModelFile load_model(const fs::path& path)
{
    auto in = open_in(path);
    std::string line;
    if (!std::getline(in, line) || line != "uqseg-model 1")
        throw std::runtime_error(path.string() + ": not a uqseg model file");
    ModelFile m;
    m.source = path.string();
    std::size_t count = 0;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        const auto sp = line.find(' ');
        std::string key = line.substr(0, sp);
        std::string value = sp == std::string::npos ? "" : line.substr(sp + 1);
        if (key == "tensors")
            count = parse_size(value, path.string());
        else
            m.header.emplace_back(std::move(key), std::move(value));
    }
    if (!ended) throw std::runtime_error(path.string() + ": model header not terminated");
    for (std::size_t i = 0; i < count; ++i) m.tensors.push_back(read_uqt(in, path.string()));
    if (in.peek() != std::char_traits<char>::eof())
        throw std::runtime_error(path.string() + ": trailing bytes after the last tensor");
    return m;
}

std::size_t CsvTable::column(const std::string& name) const
{
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::runtime_error(source + ": no column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
}

CsvTable read_csv(const fs::path& path)
{
    auto in = open_in(path);
    CsvTable t;
    t.source = path.string();
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty CSV file");
    t.columns = split(line, ',');
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split(line, ',');
        if (fields.size() != t.columns.size())
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(t.columns.size()) + " fields, got " +
                                     std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
    }
    return t;
}

void write_csv(const fs::path& path, const CsvTable& table)
{
    auto out = open_out(path);
    auto write_row = [&out](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out << ',';
            out << row[i];
        }
        out << '\n';
    };
    write_row(table.columns);
    for (const auto& r : table.rows) write_row(r);
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

std::string format_double(double v)
{
    // Shortest text that parses back to the same double.
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& context)
{
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(context + ": cannot parse number '" + s + "'");
    }
}

std::size_t parse_size(const std::string& s, const std::string& context)
{
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
        throw std::runtime_error(context + ": cannot parse count '" + s + "'");
    return v;
}

void write_pgm(const fs::path& path, const Tensor& map)
{
    if (map.ndim() != 2) throw std::invalid_argument("write_pgm: expected an H x W map");
    const auto [lo_it, hi_it] = std::minmax_element(map.values().begin(), map.values().end());
    const double lo = map.empty() ? 0.0 : *lo_it;
    const double hi = map.empty() ? 0.0 : *hi_it;
    auto out = open_out(path);
    out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
    for (double v : map.values()) {
        const double s = hi > lo ? (v - lo) / (hi - lo) : 0.0;
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(s * 255.0))));
    }
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

PgmImage read_pgm(const fs::path& path)
{
    auto in = open_in(path);
    std::string magic;
    int maxval = 0;
    PgmImage img;
    if (!(in >> magic >> img.width >> img.height >> maxval) || magic != "P5" || maxval != 255)
        throw std::runtime_error(path.string() + ": not an 8-bit binary PGM");
    in.get();
    img.pixels.resize(img.width * img.height);
    if (!in.read(reinterpret_cast<char*>(img.pixels.data()),
                 static_cast<std::streamsize>(img.pixels.size())))
        throw std::runtime_error(path.string() + ": truncated PGM payload");
    return img;
}

void write_key_values(const fs::path& path,
                      const std::vector<std::pair<std::string, std::string>>& entries)
{
    auto out = open_out(path);
    for (const auto& [k, v] : entries) out << k << '=' << v << '\n';
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

std::vector<std::pair<std::string, std::string>> read_key_values(const fs::path& path)
{
    auto in = open_in(path);
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
            throw std::runtime_error(path.string() + ": malformed line '" + line + "'");
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

} // namespace uqseg::io
