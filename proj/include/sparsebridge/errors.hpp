#pragma once
// Error types shared by every module. Argument and contract violations throw;
// callers that can recover (retrieval fallback, CLI diagnostics) catch the
// specific subclass.

#include <stdexcept>
#include <string>

namespace sparsebridge {

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Retrieval position filter excluded every knowledge-base row.
struct NoCandidateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Missing config key, missing upstream artifact, unknown subcommand.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NRMSE against a constant reference volume.
struct NormalizationError : std::domain_error {
    using std::domain_error::domain_error;
};

// On-disk format failures. Each subclass names a distinct failure mode.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ManifestError : LoadError {
    using LoadError::LoadError;
};
struct MissingSliceError : LoadError {
    MissingSliceError(const std::string &what, long position) : LoadError(what), position(position) {}
    long position;
};
struct TruncatedSliceError : LoadError {
    using LoadError::LoadError;
};
struct ShapeMismatchError : LoadError {
    using LoadError::LoadError;
};
struct RangeError : LoadError {
    using LoadError::LoadError;
};

inline void require(bool cond, const std::string &msg) {
    if (!cond) throw InvalidArgument(msg);
}

} // namespace sparsebridge
