#pragma once

#include <stdexcept>
#include <string>

namespace bhn {

/// Failure category. The CLI maps these onto process exit codes.
enum class ErrorKind {
  Config = 1,
  Data = 2,
  Numerical = 3,
  Shape = 4,
  Binding = 5,
  Format = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::Data, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::Numerical, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::Shape, w) {}
};
struct BindingError : Error {
  explicit BindingError(const std::string& w) : Error(ErrorKind::Binding, w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorKind::Format, w) {}
};

/// Process exit code for an error: 1 config, 2 data, 3 numerical.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Binding:
    case ErrorKind::Shape:
      return 1;
    case ErrorKind::Data:
    case ErrorKind::Format:
      return 2;
    case ErrorKind::Numerical:
      return 3;
  }
  return 1;
}

}  // namespace bhn
