#include "mvmnp/csv.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <string>
#include <system_error>
#include <unordered_map>
#include <vector>

namespace mvmnp {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

bool parse_int(const std::string& s, int& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  const auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e && !s.empty();
}

bool parse_real(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  const auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e && !s.empty();
}

[[noreturn]] void fail(const std::string& path, std::size_t line, const std::string& what) {
  throw ParseError(path + " line " + std::to_string(line) + ": " + what);
}

// Column names in schema order.
std::vector<std::string> schema_columns(const ChoiceStructure& sc) {
  std::vector<std::string> cols;
  cols.push_back("id");
  for (int k = 0; k < sc.K; ++k) cols.push_back("y_" + std::to_string(k + 1));
  for (int c = 0; c < sc.n_d; ++c) cols.push_back("d_" + std::to_string(c + 1));
  for (int k = 0; k < sc.K; ++k)
    for (int alt = 0; alt <= sc.J[k]; ++alt)
      for (int c = 0; c < sc.n_a; ++c)
        cols.push_back("a" + std::to_string(k + 1) + "_" + std::to_string(alt) + "_" +
                       std::to_string(c + 1));
  return cols;
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

void write_dataset_csv(const ChoiceStructure& sc, const Dataset& data, const std::string& path) {
  data.validate(sc);
  std::ofstream out(path);
  if (!out) throw Error("write_dataset_csv: cannot open " + path);
  const std::vector<std::string> cols = schema_columns(sc);
  std::string line;
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (c) line += ',';
    line += cols[c];
  }
  out << line << '\n';
  for (int i = 0; i < data.N; ++i) {
    line = std::to_string(i);
    for (int k = 0; k < sc.K; ++k) line += ',' + std::to_string(data.y(i, k));
    for (int c = 0; c < sc.n_d; ++c) line += ',' + format_double(data.x_d(i, c));
    for (int k = 0; k < sc.K; ++k)
      for (int c = 0; c < (sc.J[k] + 1) * sc.n_a; ++c)
        line += ',' + format_double(data.x_a[k](i, c));
    out << line << '\n';
  }
  out.flush();
  if (!out) throw Error("write_dataset_csv: write failed for " + path);
}

Dataset load_csv(const std::string& path, const ChoiceStructure& sc) {
  std::ifstream in(path);
  if (!in) throw ParseError("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + " line 1: missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_line(line);
  std::unordered_map<std::string, int> index;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (index.count(header[c])) fail(path, 1, "duplicate column " + header[c]);
    index[header[c]] = static_cast<int>(c);
  }
  const std::vector<std::string> cols = schema_columns(sc);
  for (const std::string& name : cols)
    if (!index.count(name)) fail(path, 1, "missing column " + name);
  if (header.size() != cols.size()) fail(path, 1, "unexpected extra columns in header");

  // Precompute slot positions.
  std::vector<int> y_col(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k) y_col[k] = index.at("y_" + std::to_string(k + 1));
  std::vector<int> d_col(static_cast<std::size_t>(sc.n_d));
  for (int c = 0; c < sc.n_d; ++c) d_col[c] = index.at("d_" + std::to_string(c + 1));
  std::vector<std::vector<int>> a_col(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k) {
    a_col[k].resize(static_cast<std::size_t>((sc.J[k] + 1) * sc.n_a));
    for (int alt = 0; alt <= sc.J[k]; ++alt)
      for (int c = 0; c < sc.n_a; ++c)
        a_col[k][static_cast<std::size_t>(alt * sc.n_a + c)] =
            index.at("a" + std::to_string(k + 1) + "_" + std::to_string(alt) + "_" +
                     std::to_string(c + 1));
  }
  const int id_col = index.at("id");

  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    std::vector<std::string> fields = split_line(line);
    if (fields.size() != cols.size())
      fail(path, line_no,
           "expected " + std::to_string(cols.size()) + " fields, found " +
               std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw ParseError(path + ": no data rows");

  Dataset data;
  data.N = static_cast<int>(rows.size());
  data.y = IntMatrix::Zero(data.N, sc.K);
  data.x_d = Matrix::Zero(data.N, sc.n_d);
  data.x_a.resize(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k)
    data.x_a[k] = RowMatrix::Zero(data.N, (sc.J[k] + 1) * sc.n_a);

  for (int i = 0; i < data.N; ++i) {
    const std::size_t file_line = static_cast<std::size_t>(i) + 2;
    const std::vector<std::string>& fields = rows[static_cast<std::size_t>(i)];
    int id = 0;  // ids are validated as integers but not stored
    if (!parse_int(fields[static_cast<std::size_t>(id_col)], id))
      fail(path, file_line, "non-integer id value '" + fields[static_cast<std::size_t>(id_col)] +
                                "'");
    (void)id;
    for (int k = 0; k < sc.K; ++k) {
      int y = 0;
      const std::string& cell = fields[static_cast<std::size_t>(y_col[k])];
      if (!parse_int(cell, y))
        fail(path, file_line, "non-integer choice value '" + cell + "' in y_" +
                                  std::to_string(k + 1));
      if (y < 0 || y > sc.J[k])
        fail(path, file_line, "choice y_" + std::to_string(k + 1) + " = " + std::to_string(y) +
                                  " outside [0, " + std::to_string(sc.J[k]) + "]");
      data.y(i, k) = y;
    }
    for (int c = 0; c < sc.n_d; ++c) {
      const std::string& cell = fields[static_cast<std::size_t>(d_col[c])];
      if (!parse_real(cell, data.x_d(i, c)))
        fail(path, file_line, "non-numeric value '" + cell + "' in d_" + std::to_string(c + 1));
    }
    for (int k = 0; k < sc.K; ++k)
      for (std::size_t slot = 0; slot < a_col[k].size(); ++slot) {
        const std::string& cell = fields[static_cast<std::size_t>(a_col[k][slot])];
        if (!parse_real(cell, data.x_a[k](i, static_cast<int>(slot))))
          fail(path, file_line, "non-numeric alternative covariate '" + cell + "'");
      }
  }
  data.validate(sc);
  return data;
}

void write_table_csv(const std::string& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("write_table_csv: cannot open " + path);
  std::string line;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c) line += ',';
    line += header[c];
  }
  out << line << '\n';
  for (const std::vector<std::string>& row : rows) {
    if (row.size() != header.size())
      throw DimensionError("write_table_csv: row width " + std::to_string(row.size()) +
                           " does not match header width " + std::to_string(header.size()));
    line.clear();
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) line += ',';
      line += row[c];
    }
    out << line << '\n';
  }
  out.flush();
  if (!out) throw Error("write_table_csv: write failed for " + path);
}

std::vector<std::vector<std::string>> read_table_csv(const std::string& path,
                                                     const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line)) fail(path, 1, "missing header line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> got = split_line(line);
  if (got != header) fail(path, 1, "header does not match the expected column list");
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    std::vector<std::string> fields = split_line(line);
    if (fields.size() != header.size())
      fail(path, line_no,
           "expected " + std::to_string(header.size()) + " fields, found " +
               std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace mvmnp
