#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "fives/errors.hpp"

namespace fives::data {

// RFC 4180 reader: quoted fields, doubled-quote escapes, fields may
// contain commas and newlines; accepts LF or CRLF records.
class CsvReader {
public:
    explicit CsvReader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) throw ParseError("cannot open csv file: " + path);
    }

    // Returns false at end of input. Throws on malformed quoting.
    bool next_record(std::vector<std::string>& fields) {
        fields.clear();
        if (peek() == EOF) return false;
        std::string field;
        bool in_quotes = false;
        while (true) {
            const int c = in_.get();
            if (c == EOF) {
                if (in_quotes) throw ParseError("csv: unterminated quoted field");
                fields.push_back(std::move(field));
                return true;
            }
            if (in_quotes) {
                if (c == '"') {
                    if (in_.peek() == '"') {
                        in_.get();
                        field.push_back('"');
                    } else {
                        in_quotes = false;
                    }
                } else {
                    field.push_back(static_cast<char>(c));
                }
                continue;
            }
            switch (c) {
                case '"':
                    if (!field.empty())
                        throw ParseError("csv: quote inside unquoted field");
                    in_quotes = true;
                    break;
                case ',':
                    fields.push_back(std::move(field));
                    field.clear();
                    break;
                case '\r':
                    if (in_.peek() == '\n') in_.get();
                    fields.push_back(std::move(field));
                    return true;
                case '\n':
                    fields.push_back(std::move(field));
                    return true;
                default:
                    field.push_back(static_cast<char>(c));
            }
        }
    }

private:
    int peek() { return in_.peek(); }
    std::ifstream in_;
};

}  // namespace fives::data
