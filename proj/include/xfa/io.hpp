#pragma once

#include "xfa/types.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace xfa::io {

/// %.17g: always enough digits for an exact round trip.
inline std::string format_double(double x)
{
    if (x == 0.0) return "0";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

/// Headerless, row-major, comma-separated, LF line endings.
inline void write_csv(const std::string& path, const Matrix& m)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write " + path);
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            if (j) out << ',';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
    if (!out) throw InvalidArgument("failed writing " + path);
}

inline void write_csv(const std::string& path, const Vector& v) { write_csv(path, Matrix(v)); }

inline Matrix read_csv(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot read " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.back() == ',')
            throw InvalidArgument(path + ":" + std::to_string(lineno) + ": trailing comma");
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            // strtod rather than stod: subnormals set ERANGE but parse exactly.
            // Overflow to inf is rejected; a literal inf/nan passes through.
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            const char* tail = end;
            while (*tail == ' ' || *tail == '\t') ++tail;
            if (end == cell.c_str() || *tail != '\0' || std::isinf(v) != (cell.find_first_of("iI") != std::string::npos))
                throw InvalidArgument(path + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
            row.push_back(v);
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw InvalidArgument(path + ":" + std::to_string(lineno) + ": ragged row");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw InvalidArgument(path + " is empty");
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return m;
}

inline Vector read_csv_vector(const std::string& path)
{
    const Matrix m = read_csv(path);
    if (m.cols() == 1) return m.col(0);
    if (m.rows() == 1) return m.row(0).transpose();
    throw InvalidArgument(path + " is not a vector");
}

} // namespace xfa::io
