#pragma once

#include "bcm/mesh.hpp"

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace bcm {

struct PointScalar {
    std::string name;
    std::span<const double> values;
};

struct PointVector {
    std::string name;
    std::span<const Vec2> values;
};

/// Legacy-VTK ASCII unstructured grid (triangles are cell type 5, z = 0).
void write_vtk(std::ostream& os, const SimplexMesh& mesh, const std::string& title,
               std::span<const PointScalar> scalars = {}, std::span<const PointVector> vectors = {});

void write_vtk(const std::filesystem::path& path, const SimplexMesh& mesh, const std::string& title,
               std::span<const PointScalar> scalars = {}, std::span<const PointVector> vectors = {});

} // namespace bcm
