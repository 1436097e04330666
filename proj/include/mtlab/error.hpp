#pragma once

#include <stdexcept>
#include <string>

namespace mtlab {

// Error categories map onto CLI exit codes: config errors exit 2, missing
// dependency artifacts exit 3, runtime numeric failures exit 4.
enum class ErrorKind { Config, Dependency, Numeric };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline Error config_error(const std::string& msg) { return Error(ErrorKind::Config, msg); }
inline Error dependency_error(const std::string& msg) { return Error(ErrorKind::Dependency, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::Numeric, msg); }

}  // namespace mtlab
