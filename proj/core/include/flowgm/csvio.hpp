#pragma once

// CSV emission and ingestion. Sample files carry the one-line provenance
// header `dim=<d>,seed=<s>,source=<kind>` followed by one row of
// coordinates per sample; curve files carry a named-column header followed
// by numeric rows. Numbers are written in shortest round-trip form, so
// rewriting a parsed file reproduces it exactly.

#include <cstdint>
#include <string>
#include <vector>

#include "flowgm/field.hpp"

namespace flowgm {

struct SampleSet {
  int dim = 0;
  std::uint64_t seed = 0;
  std::string source;  // free-form provenance tag, no commas or newlines
  Mat x;               // one sample per row, dim columns

  long count() const { return x.rows(); }
};

void write_samples_csv(const std::string& path, const SampleSet& s);

// Malformed headers or rows raise ConfigError naming the line number.
SampleSet read_samples_csv(const std::string& path);

void write_table_csv(const std::string& path,
                     const std::vector<std::string>& columns,
                     const std::vector<std::vector<double>>& rows);

// Shortest round-trip decimal form of a double (as written to CSVs).
std::string format_double(double v);

}  // namespace flowgm
