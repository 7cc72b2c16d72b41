#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lcrec/errors.hpp"

namespace lcrec::csv {

/// Shortest round-trippable-enough decimal form used by every CSV writer.
inline std::string num(double v, int digits = 12)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',')
{
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto next = line.find(sep, pos);
        std::string_view cell = line.substr(pos, next == std::string_view::npos ? line.size() - pos : next - pos);
        while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
        while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r'))
            cell.remove_suffix(1);
        out.emplace_back(cell);
        if (next == std::string_view::npos) break;
        pos = next + 1;
    }
    return out;
}

/// Header-indexed table read fully into memory.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<int> line_numbers;  // 1-based source line of each row

    [[nodiscard]] int column(std::string_view name) const
    {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }

    /// Column index or DataError naming the missing column.
    [[nodiscard]] int require(std::string_view name) const
    {
        const int c = column(name);
        if (c < 0) throw DataError("schema error: missing column '" + std::string(name) + "'");
        return c;
    }
};

inline Table read(std::istream& in)
{
    Table t;
    std::string line;
    int lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r" || line[0] == '#') continue;
        auto cells = split(line);
        if (!have_header) {
            t.header = std::move(cells);
            have_header = true;
            continue;
        }
        if (cells.size() != t.header.size()) {
            std::ostringstream os;
            os << "schema error: line " << lineno << " has " << cells.size() << " fields, expected "
               << t.header.size();
            throw DataError(os.str());
        }
        t.rows.push_back(std::move(cells));
        t.line_numbers.push_back(lineno);
    }
    if (!have_header) throw DataError("schema error: empty file (no header)");
    return t;
}

inline Table read_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    return read(in);
}

inline double parse_double(const std::string& cell, int line, std::string_view column)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used == cell.size()) return v;
    } catch (const std::exception&) {
    }
    std::ostringstream os;
    os << "schema error: line " << line << ", column '" << column << "': not a number: '" << cell << "'";
    throw DataError(os.str());
}

inline long long parse_int(const std::string& cell, int line, std::string_view column)
{
    try {
        std::size_t used = 0;
        const long long v = std::stoll(cell, &used);
        if (used == cell.size()) return v;
    } catch (const std::exception&) {
    }
    std::ostringstream os;
    os << "schema error: line " << line << ", column '" << column << "': not an integer: '" << cell << "'";
    throw DataError(os.str());
}

/// Writes `content` to a sibling temp file, then renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, std::string_view content)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace lcrec::csv
