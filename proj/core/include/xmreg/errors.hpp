#pragma once

#include <stdexcept>
#include <string>

namespace xmreg {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Four displaced corners do not determine a homography (singular system).
class DegenerateCorners : public Error {
public:
    explicit DegenerateCorners(const std::string& msg) : Error(msg) {}
};

class SingularMatrix : public Error {
public:
    explicit SingularMatrix(const std::string& msg) : Error(msg) {}
};

class ShapeMismatch : public Error {
public:
    explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};

class ShapeNotDivisible : public Error {
public:
    explicit ShapeNotDivisible(const std::string& msg) : Error(msg) {}
};

class TimestepOutOfRange : public Error {
public:
    explicit TimestepOutOfRange(const std::string& msg) : Error(msg) {}
};

class EmptyMask : public Error {
public:
    explicit EmptyMask(const std::string& msg) : Error(msg) {}
};

class ArchitectureMismatch : public Error {
public:
    explicit ArchitectureMismatch(const std::string& msg) : Error(msg) {}
};

class MissingFile : public Error {
public:
    explicit MissingFile(const std::string& msg) : Error(msg) {}
};

class ManifestMismatch : public Error {
public:
    explicit ManifestMismatch(const std::string& msg) : Error(msg) {}
};

class PatchTooLarge : public Error {
public:
    explicit PatchTooLarge(const std::string& msg) : Error(msg) {}
};

class CheckpointMissing : public Error {
public:
    explicit CheckpointMissing(const std::string& msg) : Error(msg) {}
};

/// A pipeline stage failed; carries the stage identity in the message.
class StageFailure : public Error {
public:
    explicit StageFailure(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

} // namespace xmreg
