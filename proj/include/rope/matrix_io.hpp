#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace rope {

// Plain text numeric table: "rows cols" header line, one row per line.
struct Matrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> values;  // row-major
};

void save_matrix(const Matrix& m, const std::filesystem::path& path);
Matrix load_matrix(const std::filesystem::path& path);

}  // namespace rope
