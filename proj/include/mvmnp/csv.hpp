#pragma once

// CSV persistence. Dataset files carry one header row and one row per
// observation with the columns
//   id, y_1..y_K, d_1..d_{n_d}, a{k}_{alt}_{cov}
// where k is the 1-based choice, alt the 0-based alternative including the
// base, and cov the 1-based alternative covariate. Values are numeric only
// (no quoting); doubles are written shortest-round-trip, so a write/load
// cycle reproduces every bit. Parse failures raise ParseError naming the
// offending file line (the header is line 1).

#include "mvmnp/types.hpp"

#include <string>
#include <vector>

namespace mvmnp {

// Shortest decimal string that parses back to exactly x.
std::string format_double(double x);

void write_dataset_csv(const ChoiceStructure& sc, const Dataset& data, const std::string& path);

Dataset load_csv(const std::string& path, const ChoiceStructure& sc);

// Generic rectangular table with a header, for score/curve/comparison files.
void write_table_csv(const std::string& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows);

// Reads a table written by write_table_csv back as strings, insisting on the
// exact expected header. Tolerates CRLF endings and one trailing blank line.
std::vector<std::vector<std::string>> read_table_csv(const std::string& path,
                                                     const std::vector<std::string>& header);

}  // namespace mvmnp
