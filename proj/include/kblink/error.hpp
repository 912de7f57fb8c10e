#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace kblink {

// Error taxonomy shared across the library. The CLI maps the kind string onto
// a machine-readable error record and exit code 3; usage errors exit 2.
class error : public std::runtime_error {
public:
    error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct parse_error : error {
    explicit parse_error(const std::string& m) : error("parse", m) {}
};

struct integrity_error : error {
    explicit integrity_error(const std::string& m) : error("integrity", m) {}
};

struct validation_error : error {
    explicit validation_error(const std::string& m) : error("validation", m) {}
};

struct shape_error : error {
    explicit shape_error(const std::string& m) : error("shape", m) {}
};

struct range_error : error {
    explicit range_error(const std::string& m) : error("range", m) {}
};

struct span_error : error {
    explicit span_error(const std::string& m) : error("span", m) {}
};

struct length_error : error {
    explicit length_error(const std::string& m) : error("length", m) {}
};

struct contract_error : error {
    explicit contract_error(const std::string& m) : error("contract", m) {}
};

struct numeric_error : error {
    explicit numeric_error(const std::string& m) : error("numeric", m) {}
};

struct io_error : error {
    explicit io_error(const std::string& m) : error("io", m) {}
};

}  // namespace kblink
