#include "bcm/vtk.hpp"

#include <fstream>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace bcm {

void write_vtk(std::ostream& os, const SimplexMesh& mesh, const std::string& title,
               std::span<const PointScalar> scalars, std::span<const PointVector> vectors) {
    const auto nn = mesh.num_nodes();
    const auto ne = mesh.num_elements();
    os << "# vtk DataFile Version 2.0\n";
    os << (title.empty() ? std::string("bcm") : title) << "\n";
    os << "ASCII\n";
    os << "DATASET UNSTRUCTURED_GRID\n";
    os << std::setprecision(17);
    os << "POINTS " << nn << " double\n";
    for (const auto& p : mesh.nodes()) os << p.x << " " << p.y << " 0\n";
    os << "CELLS " << ne << " " << 4 * ne << "\n";
    for (const auto& t : mesh.elements()) os << "3 " << t[0] << " " << t[1] << " " << t[2] << "\n";
    os << "CELL_TYPES " << ne << "\n";
    for (std::size_t e = 0; e < ne; ++e) os << "5\n";

    if (scalars.empty() && vectors.empty()) return;
    os << "POINT_DATA " << nn << "\n";
    for (const auto& s : scalars) {
        if (s.values.size() != nn) throw std::invalid_argument("vtk scalar '" + s.name + "' has wrong size");
        os << "SCALARS " << s.name << " double 1\nLOOKUP_TABLE default\n";
        for (double v : s.values) os << v << "\n";
    }
    for (const auto& v : vectors) {
        if (v.values.size() != nn) throw std::invalid_argument("vtk vector '" + v.name + "' has wrong size");
        os << "VECTORS " << v.name << " double\n";
        for (const auto& x : v.values) os << x.x << " " << x.y << " 0\n";
    }
}

void write_vtk(const std::filesystem::path& path, const SimplexMesh& mesh, const std::string& title,
               std::span<const PointScalar> scalars, std::span<const PointVector> vectors) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_vtk(os, mesh, title, scalars, vectors);
}

} // namespace bcm
