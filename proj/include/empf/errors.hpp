#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace empf {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class DisconnectedNetwork : public Error {
  public:
    using Error::Error;
};

class InvalidBranch : public Error {
  public:
    using Error::Error;
};

class NotASwitch : public Error {
  public:
    using Error::Error;
};

class DimensionMismatch : public Error {
  public:
    using Error::Error;
};

class SingularJacobian : public Error {
  public:
    using Error::Error;
};

class NoDer : public Error {
  public:
    using Error::Error;
};

class NoLeader : public Error {
  public:
    using Error::Error;
};

class NoSolution : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

/// Case-file syntax error. `position` is a byte offset into the input, or -1 when unknown.
class ParseError : public Error {
  public:
    ParseError(const std::string& what, long position)
        : Error(position >= 0 ? what + " (at byte " + std::to_string(position) + ")" : what),
          position_(position) {}

    long position() const noexcept { return position_; }

  private:
    long position_;
};

/// Case-file semantic error; `rule` names the violated check.
class ValidationError : public Error {
  public:
    ValidationError(std::string rule, const std::string& detail)
        : Error(rule + ": " + detail), rule_(std::move(rule)) {}

    const std::string& rule() const noexcept { return rule_; }

  private:
    std::string rule_;
};

class NotConverged : public Error {
  public:
    NotConverged(int max_iter, std::vector<double> residual_history)
        : Error("power flow did not converge within " + std::to_string(max_iter) + " iterations"),
          max_iter_(max_iter),
          residual_history_(std::move(residual_history)) {}

    int max_iter() const noexcept { return max_iter_; }
    const std::vector<double>& residual_history() const noexcept { return residual_history_; }

  private:
    int max_iter_;
    std::vector<double> residual_history_;
};

}  // namespace empf
