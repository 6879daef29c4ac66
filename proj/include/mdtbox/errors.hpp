#pragma once

#include <stdexcept>
#include <string>

namespace mdtbox {

// Base error with a machine-parseable category. The CLI prints failures as
// a single line `error <category>: <message>` and exits nonzero.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}
    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct ParameterError : Error {
    explicit ParameterError(const std::string& m) : Error("parameter", m) {}
};
struct DataError : Error {
    explicit DataError(const std::string& m) : Error("data", m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

} // namespace mdtbox
