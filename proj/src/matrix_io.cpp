#include "rope/matrix_io.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace rope {

void save_matrix(const Matrix& m, const std::filesystem::path& path) {
  if (m.values.size() != static_cast<std::size_t>(m.rows * m.cols))
    throw std::invalid_argument("save_matrix: values do not match rows x cols");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_matrix: cannot open " + path.string());
  out << m.rows << ' ' << m.cols << '\n';
  char buf[32];
  for (std::int64_t i = 0; i < m.rows; ++i)
    for (std::int64_t j = 0; j < m.cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.values[static_cast<std::size_t>(i * m.cols + j)]);
      out << buf << (j + 1 < m.cols ? ' ' : '\n');
    }
  if (!out) throw std::runtime_error("save_matrix: write failed for " + path.string());
}

Matrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_matrix: cannot open " + path.string());
  Matrix m;
  if (!(in >> m.rows >> m.cols) || m.rows < 0 || m.cols < 0)
    throw std::runtime_error("load_matrix: bad header in " + path.string());
  m.values.resize(static_cast<std::size_t>(m.rows * m.cols));
  for (auto& v : m.values)
    if (!(in >> v)) throw std::runtime_error("load_matrix: truncated table in " + path.string());
  return m;
}

}  // namespace rope
