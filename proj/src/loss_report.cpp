#include "uld/loss_report.hpp"

#include "uld/eval.hpp"

#include <fstream>
#include <stdexcept>

namespace uld {

void LossReport::write_csv(const std::string& path, bool append) const {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw std::runtime_error("LossReport: cannot open '" + path + "'");
    if (!append) out << "iteration,stage,loss_name,value\n";
    for (const auto& r : records_)
        out << r.iteration << "," << r.stage << "," << r.name << "," << format_double(r.value) << "\n";
}

}  // namespace uld
