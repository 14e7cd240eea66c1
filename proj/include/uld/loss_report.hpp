#pragma once

#include <cmath>
#include <string>
#include <vector>

namespace uld {

struct LossRecord {
    long iteration = 0;
    std::string stage;
    std::string name;
    double value = 0.0;
};

// Line-delimited training log: one (iteration, stage, loss_name, value)
// record per entry, written as CSV.
class LossReport {
public:
    void add(long iteration, const std::string& stage, const std::string& name, double value) {
        records_.push_back({iteration, stage, name, value});
    }

    bool all_finite() const {
        for (const auto& r : records_)
            if (!std::isfinite(r.value)) return false;
        return true;
    }

    const std::vector<LossRecord>& records() const { return records_; }

    void write_csv(const std::string& path, bool append = false) const;

private:
    std::vector<LossRecord> records_;
};

}  // namespace uld
