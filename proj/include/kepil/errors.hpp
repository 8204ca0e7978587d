#pragma once

#include <stdexcept>
#include <string>

namespace kepil {

// Base of every error the library throws. Callers that only want a message
// can catch this; the subclasses exist so tests and the CLI can tell the
// failure classes apart.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class GraphError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

// A variant family has nothing to act on for the given prompt.
class InapplicableError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint or dataset could not be loaded (bad magic, checksum, config).
class LoadError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace kepil
