#pragma once

#include <stdexcept>
#include <string>

namespace rcann {

// Exit codes shared by the command-line front end.
enum class ExitCode : int {
  ok = 0,
  usage = 2,
  data = 3,
  provider = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::data)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(what, ExitCode::usage) {}
};

// Corrupt or truncated on-disk data. `section` names the part of the file that failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& section, const std::string& what)
      : Error("format error in " + section + ": " + what, ExitCode::data), section_(section) {}

  const std::string& section() const noexcept { return section_; }

 private:
  std::string section_;
};

class BuildError : public Error {
 public:
  explicit BuildError(const std::string& what) : Error(what, ExitCode::data) {}
};

class ProviderError : public Error {
 public:
  explicit ProviderError(const std::string& what) : Error(what, ExitCode::provider) {}
};

// The provider could not be reached after `retries` attempts.
class TransportError : public ProviderError {
 public:
  TransportError(const std::string& what, int retries)
      : ProviderError(what + " (after " + std::to_string(retries) + " retries)"),
        retries_(retries) {}

  int retries() const noexcept { return retries_; }

 private:
  int retries_;
};

class ProtocolError : public ProviderError {
 public:
  explicit ProtocolError(const std::string& what) : ProviderError("protocol error: " + what) {}
};

}  // namespace rcann
