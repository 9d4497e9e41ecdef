#pragma once

#include <stdexcept>
#include <string>

namespace psypipe {

// Every error carries a stable category string so the CLI can exit with a
// machine-readable failure class. Categories: config, io, schema, range,
// parse, provenance, transport, credential, degenerate, alignment, capacity,
// incomplete, key_mismatch, decode, coverage, internal.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}
    const std::string& category() const { return category_; }

private:
    std::string category_;
};

#define PSYPIPE_ERROR_CLASS(Name, category)                       \
    class Name : public Error {                                   \
    public:                                                       \
        explicit Name(const std::string& what)                    \
            : Error(category, what) {}                            \
    }

PSYPIPE_ERROR_CLASS(ConfigError, "config");
PSYPIPE_ERROR_CLASS(IoError, "io");
PSYPIPE_ERROR_CLASS(SchemaError, "schema");
PSYPIPE_ERROR_CLASS(RangeError, "range");
PSYPIPE_ERROR_CLASS(ParseError, "parse");
PSYPIPE_ERROR_CLASS(ProvenanceError, "provenance");
PSYPIPE_ERROR_CLASS(TransportError, "transport");
PSYPIPE_ERROR_CLASS(CredentialError, "credential");
PSYPIPE_ERROR_CLASS(DegenerateInputError, "degenerate");
PSYPIPE_ERROR_CLASS(AlignmentError, "alignment");
PSYPIPE_ERROR_CLASS(CapacityError, "capacity");
PSYPIPE_ERROR_CLASS(IncompleteInputError, "incomplete");
PSYPIPE_ERROR_CLASS(KeyMismatchError, "key_mismatch");
PSYPIPE_ERROR_CLASS(DecodeError, "decode");
PSYPIPE_ERROR_CLASS(CoverageError, "coverage");

#undef PSYPIPE_ERROR_CLASS

}  // namespace psypipe
