// Copyright (c) 2026, the dgpaq authors.
#pragma once

#include <stdexcept>
#include <string>

namespace dgpaq {

// Error categories map one-to-one onto the CLI's machine-parsable codes.
enum class ErrorCode {
  dimension,      // incompatible shapes
  domain,         // numeric domain violation (log of nonpositive, ...)
  decomposition,  // Cholesky failed after jitter escalation
  singular,       // zero pivot in a triangular solve
  contract,       // API misuse (non-scalar loss, ...)
  data,           // unusable dataset content
  schema,         // malformed input file structure
  parameter,      // invalid configuration value
  divergence,     // training produced non-finite quantities
  lookup,         // unknown station or key
  size,           // request exceeds a hard size limit
  io,             // filesystem failure
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }
  const char* code_name() const { return error_code_name(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace dgpaq
