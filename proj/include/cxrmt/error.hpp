#pragma once

#include <stdexcept>
#include <string>

namespace cxrmt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct NumericsError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct PreconditionError : Error { using Error::Error; };
struct DegenerateImageError : Error { using Error::Error; };
struct DegenerateClassError : Error { using Error::Error; };
struct UndefinedMetricError : Error { using Error::Error; };

// Row-numbered ingestion failure (manifest, annotation and score CSVs).
struct IngestError : Error {
  IngestError(const std::string& file, std::size_t row, const std::string& what)
      : Error(file + ":" + std::to_string(row) + ": " + what), row(row) {}
  std::size_t row;
};

}  // namespace cxrmt
