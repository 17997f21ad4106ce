#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "medseq/numkit.hpp"

namespace medseq::encoder {

// Clinical-code <-> token-id map. Ids 0..2 are reserved and never
// assigned to clinical codes. The text format round-trips bit-exactly.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kMask = 1;
    static constexpr int kUnk = 2;
    static constexpr int kReserved = 3;

    Vocabulary();

    int add(const std::string& code);      // returns the new id
    int id(const std::string& code) const; // throws VocabError if unknown
    bool contains(const std::string& code) const;
    const std::string& code(int id) const;
    int size() const { return static_cast<int>(id_to_code_.size()); }

    void save(const std::string& path) const;
    std::string to_text() const;
    static Vocabulary load(const std::string& path);
    static Vocabulary from_text(const std::string& text);

    bool operator==(const Vocabulary& o) const { return id_to_code_ == o.id_to_code_; }

private:
    std::vector<std::string> id_to_code_;
    std::unordered_map<std::string, int> code_to_id_;
};

}  // namespace medseq::encoder
