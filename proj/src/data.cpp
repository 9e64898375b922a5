#include "blockvar/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace blockvar {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& s, const char* what, int line_no) {
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ParseError(std::string("non-numeric ") + what + ", line " + std::to_string(line_no));
    }
    if (pos != s.size() || !std::isfinite(v)) {
        throw ParseError(std::string("non-numeric ") + what + ", line " + std::to_string(line_no));
    }
    return v;
}

}  // namespace

ExperimentTable parse_experiment_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) {
        throw ValidationError("empty input file");
    }
    if (split_csv_line(line) != std::vector<std::string>{"unit_id", "block", "z", "y"}) {
        throw ParseError("expected header 'unit_id,block,z,y', line 1");
    }
    ExperimentTable table;
    std::set<std::string> seen_ids;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 4) {
            throw ParseError("wrong column count, line " + std::to_string(line_no));
        }
        UnitRecord rec;
        rec.unit_id = fields[0];
        rec.block_id = fields[1];
        if (fields[2] == "1") {
            rec.arm = Arm::treated;
        } else if (fields[2] == "0") {
            rec.arm = Arm::control;
        } else {
            throw ParseError("invalid treatment code, line " + std::to_string(line_no));
        }
        rec.y_obs = parse_double(fields[3], "y", line_no);
        if (!seen_ids.insert(rec.unit_id).second) {
            throw ValidationError("duplicate unit_id '" + rec.unit_id + "'");
        }
        table.push_back(std::move(rec));
    }
    if (table.empty()) {
        throw ValidationError("empty input file");
    }
    return table;
}

std::vector<ScienceUnit> parse_science_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) {
        throw ValidationError("empty input file");
    }
    if (split_csv_line(line) != std::vector<std::string>{"block", "y0", "y1"}) {
        throw ParseError("expected header 'block,y0,y1', line 1");
    }
    std::vector<ScienceUnit> units;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 3) {
            throw ParseError("wrong column count, line " + std::to_string(line_no));
        }
        ScienceUnit u;
        u.block_id = fields[0];
        u.y0 = parse_double(fields[1], "y0", line_no);
        u.y1 = parse_double(fields[2], "y1", line_no);
        units.push_back(std::move(u));
    }
    if (units.empty()) {
        throw ValidationError("empty input file");
    }
    return units;
}

ExperimentSummary summarize(const ExperimentTable& table) {
    if (table.empty()) {
        throw ValidationError("empty experiment table");
    }
    struct Acc {
        std::vector<double> yt, yc;
    };
    std::map<std::string, Acc> by_block;  // ordered => lexicographic output
    for (const auto& rec : table) {
        auto& acc = by_block[rec.block_id];
        (rec.arm == Arm::treated ? acc.yt : acc.yc).push_back(rec.y_obs);
    }

    ExperimentSummary s;
    for (const auto& [id, acc] : by_block) {
        if (acc.yt.empty() || acc.yc.empty()) {
            throw ValidationError("no overlap in block " + id);
        }
        BlockSummary b;
        b.block_id = id;
        b.n_tk = static_cast<int>(acc.yt.size());
        b.n_ck = static_cast<int>(acc.yc.size());
        b.n_k = b.n_tk + b.n_ck;
        auto mean = [](const std::vector<double>& v) {
            double sum = 0;
            for (double x : v) sum += x;
            return sum / static_cast<double>(v.size());
        };
        auto s2 = [](const std::vector<double>& v, double m) {
            double ss = 0;
            for (double x : v) ss += (x - m) * (x - m);
            return ss / static_cast<double>(v.size() - 1);
        };
        b.mean_t = mean(acc.yt);
        b.mean_c = mean(acc.yc);
        if (b.n_tk >= 2) b.s2_t = s2(acc.yt, b.mean_t);
        if (b.n_ck >= 2) b.s2_c = s2(acc.yc, b.mean_c);
        b.tau_hat_k = b.mean_t - b.mean_c;
        b.cls = (b.n_tk >= 2 && b.n_ck >= 2) ? BlockClass::big : BlockClass::small;
        s.n += b.n_k;
        s.n_t += b.n_tk;
        s.n_c += b.n_ck;
        if (b.cls == BlockClass::small) s.n_small += b.n_k;
        s.blocks.push_back(std::move(b));
    }
    s.K = static_cast<int>(s.blocks.size());

    // size groups over small blocks, ascending size
    std::map<int, int> size_counts;
    for (const auto& b : s.blocks) {
        if (b.cls == BlockClass::small) ++size_counts[b.n_k];
    }
    for (const auto& [m_j, K_j] : size_counts) {
        s.size_groups.push_back({m_j, K_j, m_j * K_j});
    }
    s.J = static_cast<int>(s.size_groups.size());

    // exact proportion equality via integer cross-multiplication
    s.p_k_equal = true;
    for (size_t i = 1; i < s.blocks.size(); ++i) {
        long long lhs = static_cast<long long>(s.blocks[i].n_tk) * s.blocks[0].n_k;
        long long rhs = static_cast<long long>(s.blocks[0].n_tk) * s.blocks[i].n_k;
        if (lhs != rhs) {
            s.p_k_equal = false;
            break;
        }
    }
    return s;
}

BlockPartition classify_blocks(const ExperimentSummary& summary) {
    BlockPartition p;
    for (const auto& b : summary.blocks) {
        (b.cls == BlockClass::big ? p.big_ids : p.small_ids).push_back(b.block_id);
    }
    return p;
}

}  // namespace blockvar
