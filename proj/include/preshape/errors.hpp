#pragma once

#include <stdexcept>
#include <string>

namespace preshape {

// Base for every error raised by the library. Callers that only care about
// "did it work" can catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ProjectionError : public Error {
 public:
  ProjectionError(int vertex, double depth)
      : Error("nonpositive depth " + std::to_string(depth) + " at vertex " + std::to_string(vertex)),
        vertex_(vertex) {}
  int vertex() const { return vertex_; }

 private:
  int vertex_;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class TrackingError : public Error {
 public:
  TrackingError(int frame, const std::string& what)
      : Error("frame " + std::to_string(frame) + ": " + what), frame_(frame) {}
  int frame() const { return frame_; }

 private:
  int frame_;
};

class MappingError : public Error {
 public:
  using Error::Error;
};

class WarpError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace preshape
