#pragma once

#include <cstdio>
#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace obbstack {

/// Broad failure classes. The CLI maps them onto process exit codes.
enum class ErrorKind {
  usage,      ///< bad configuration or command line
  data,       ///< malformed input, contract violations, degenerate data
  numerical,  ///< optimizer or calibration failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InvalidGeometry : Error {
  explicit InvalidGeometry(const std::string& w) : Error(ErrorKind::data, "invalid geometry: " + w) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error(ErrorKind::data, "domain error: " + w) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorKind::data, "contract violation: " + w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::data, "I/O error: " + w) {}
};

struct ParseError : Error {
  ParseError(const std::string& file, std::size_t line, const std::string& w)
      : Error(ErrorKind::data, file + ":" + std::to_string(line) + ": " + w), file_(file), line_(line) {}
  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

struct SchemaError : Error {
  explicit SchemaError(const std::string& w) : Error(ErrorKind::data, "schema error: " + w) {}
};

struct DegenerateData : Error {
  explicit DegenerateData(const std::string& w) : Error(ErrorKind::data, "degenerate data: " + w) {}
};

struct CalibrationFailure : Error {
  explicit CalibrationFailure(const std::string& w)
      : Error(ErrorKind::numerical, "calibration failure: " + w) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::usage, "configuration error: " + w) {}
};

// Warnings go through a replaceable sink so tests can capture them.
using WarningSink = std::function<void(std::string_view)>;

inline WarningSink& warning_sink() {
  static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(std::string_view msg) {
  if (warning_sink()) warning_sink()(msg);
}

/// RAII swap of the warning sink.
class ScopedWarningSink {
 public:
  explicit ScopedWarningSink(WarningSink sink) : saved_(std::move(warning_sink())) {
    warning_sink() = std::move(sink);
  }
  ~ScopedWarningSink() { warning_sink() = std::move(saved_); }
  ScopedWarningSink(const ScopedWarningSink&) = delete;
  ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

 private:
  WarningSink saved_;
};

namespace detail {

// %.17g keeps every double lossless.
inline std::string fmt_double(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace detail

}  // namespace obbstack
