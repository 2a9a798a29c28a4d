#pragma once

// File formats shared by every pipeline stage.
//
// UQT tensor record (little-endian):
//   "UQT1" | dtype u8 (0 = f32, 1 = f64) | ndim u8 | ndim x u32 dims | row-major payload
//
// Model container: plain-text header of "key value" lines ending with "end",
// followed by the parameter tensors as consecutive f64 UQT records.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "uqseg/tensor.hpp"

namespace uqseg::io {

enum class DType : unsigned char { f32 = 0, f64 = 1 };

void write_uqt(std::ostream& os, const Tensor& t, DType dtype);
Tensor read_uqt(std::istream& is, const std::string& source = "<stream>");

void save_uqt(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f32);
Tensor load_uqt(const std::filesystem::path& path);

struct ModelFile {
    std::vector<std::pair<std::string, std::string>> header;
    std::vector<Tensor> tensors;
    std::string source = "<model>"; // file name used in error messages

    // First value for `key`; throws naming the key when absent.
    const std::string& get(const std::string& key) const;
    std::size_t get_size(const std::string& key) const;
    std::vector<std::string> get_all(const std::string& key) const;
    void set(const std::string& key, std::string value) { header.emplace_back(key, std::move(value)); }
};

void save_model(const std::filesystem::path& path, const ModelFile& model);
ModelFile load_model(const std::filesystem::path& path);

// Minimal CSV: comma separated, no quoting, '.' decimal separator.
struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
    std::string source = "<csv>";

    std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

// Shortest decimal form that reads back to the same double.
std::string format_double(double v);
double parse_double(const std::string& s, const std::string& context);
std::size_t parse_size(const std::string& s, const std::string& context);

// 8-bit binary PGM (P5); the map is min-max scaled to 0..255 (constant maps become 0).
void write_pgm(const std::filesystem::path& path, const Tensor& map);

struct PgmImage {
    std::size_t width = 0, height = 0;
    std::vector<unsigned char> pixels;
};
PgmImage read_pgm(const std::filesystem::path& path);

// Writes key=value lines.
void write_key_values(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, std::string>>& entries);
std::vector<std::pair<std::string, std::string>> read_key_values(const std::filesystem::path& path);

} // namespace uqseg::io
