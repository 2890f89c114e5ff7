#ifndef SSRB_CORE_ERRORS_HPP
#define SSRB_CORE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace ssrb {

// Error taxonomy shared by the whole pipeline. The CLI maps user-facing
// errors (config, state, io, format, precondition) to exit code 1 and
// everything else (numeric aborts, internal bugs) to exit code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct PreconditionError : Error {
    using Error::Error;
};

struct StateError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

}  // namespace ssrb

#endif
