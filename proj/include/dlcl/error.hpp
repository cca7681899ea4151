#pragma once

#include <stdexcept>
#include <string>

namespace dlcl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t coordinate)
      : Error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dlcl
