#pragma once

#include <stdexcept>
#include <string>

namespace sepdon {

// Exit-code taxonomy used by the CLI: usage/shape -> 2, numeric -> 3, io -> 4.

struct shape_error : std::invalid_argument {
    explicit shape_error(const std::string& what) : std::invalid_argument(what) {}
};

struct usage_error : std::invalid_argument {
    explicit usage_error(const std::string& what) : std::invalid_argument(what) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// Solver left the finite range (e.g. pseudo-spectral blow-up).
struct solver_divergence_error : numeric_error {
    explicit solver_divergence_error(const std::string& what) : numeric_error(what) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Stored bytes do not match their own metadata (truncation, bad checksum).
struct corruption_error : io_error {
    explicit corruption_error(const std::string& what) : io_error(what) {}
};

// File is readable but structurally not what we expect (version, shape bookkeeping).
struct format_error : io_error {
    explicit format_error(const std::string& what) : io_error(what) {}
};

} // namespace sepdon
