#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "lstd/common.hpp"
#include "lstd/online.hpp"

namespace lstd::cli {

/// A rectangular numeric table loaded from CSV. When the file's first column
/// is a timestamp (header named t/date/time/timestamp, or a non-numeric first
/// cell) it is kept verbatim in `timestamps` and excluded from `values`.
struct DatasetTable {
  std::vector<std::string> columns;     // names of the numeric columns
  std::vector<std::string> timestamps;  // empty when had_timestamp is false
  Matrix values;                        // T x D
  bool had_timestamp = false;
};

struct CsvOptions {
  char delimiter = ',';
};

/// Strict CSV reader for the exporter's convention and common benchmark files.
/// Rejects ragged rows and non-numeric cells with their 1-based line number
/// (the header is line 1), and rejects files containing NaN/inf values with
/// the first offending line plus a count of affected rows.
DatasetTable load_csv(const std::string& path, const CsvOptions& opt = {});

/// Serializes the forecaster (model + both prior banks + configs) to JSON.
/// Doubles round-trip exactly. Optimizer slots and the posterior-noise RNG
/// are not persisted: checkpoints capture what the model has learned, and
/// resumed training warms up its optimizer from scratch.
void save_checkpoint(const online::LstdForecaster& f, const std::string& path);

std::unique_ptr<online::LstdForecaster> load_checkpoint(const std::string& path);

/// Full command-line entry point (argv without the program name). Commands:
/// generate, train-online, evaluate, ablate, trace. Returns 0 on success,
/// 1 on runtime failure (one machine-parsable JSON error line on `err`),
/// 2 on usage errors.
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace lstd::cli
