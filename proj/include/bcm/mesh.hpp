#pragma once

#include "bcm/geometry.hpp"

#include <array>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bcm {

inline constexpr std::size_t kNoNeighbor = std::numeric_limits<std::size_t>::max();

/// Slack on barycentric weights when deciding containment.
inline constexpr double kContainmentEps = 1e-12;

class MeshError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BoundaryTag {
    std::string name;
    int id = 0;
};

/// A boundary edge. Node order follows the owning element's counter-clockwise
/// orientation, so the outward normal is the clockwise perpendicular of
/// (nodes[1] - nodes[0]).
struct BoundaryFacet {
    std::array<std::size_t, 2> nodes{};
    int tag = 0;
    std::size_t element = 0;
    int local_facet = 0; ///< facet k of an element is opposite vertex k
};

using Triangle = std::array<std::size_t, 3>;
using Edge = std::array<std::size_t, 2>;
/// Boundary facet tags keyed by the sorted node pair.
using FacetTagMap = std::map<std::pair<std::size_t, std::size_t>, int>;

/// Unstructured triangle mesh with edge, adjacency and boundary structure.
/// Immutable once built.
class SimplexMesh {
public:
    /// Derives edges, element neighbours and boundary facets from raw
    /// connectivity. Elements with negative orientation are flipped.
    /// Boundary facets missing from `facet_tags` get `default_tag`; a negative
    /// default turns an untagged facet into an error.
    static SimplexMesh build(std::vector<Vec2> nodes, std::vector<Triangle> elements,
                             std::vector<BoundaryTag> tags, const FacetTagMap& facet_tags = {},
                             int default_tag = 0);

    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t num_elements() const { return elements_.size(); }

    const std::vector<Vec2>& nodes() const { return nodes_; }
    const Vec2& node(std::size_t i) const { return nodes_[i]; }
    const std::vector<Triangle>& elements() const { return elements_; }
    const Triangle& element(std::size_t e) const { return elements_[e]; }
    const std::vector<BoundaryFacet>& boundary_facets() const { return boundary_facets_; }
    const std::vector<std::array<std::size_t, 3>>& element_neighbors() const { return neighbors_; }
    const std::vector<Edge>& edges() const { return edges_; }
    const std::vector<BoundaryTag>& tags() const { return tags_; }

    double area(std::size_t e) const { return areas_[e]; }
    /// Constant gradients of the three linear shape functions of element e.
    const std::array<Vec2, 3>& shape_gradients(std::size_t e) const { return gradients_[e]; }
    /// Lumped (row-sum) mass: one third of the area of every incident element.
    const std::vector<double>& lumped_area() const { return lumped_area_; }
    /// Shortest incident edge length per node.
    const std::vector<double>& node_spacing() const { return node_spacing_; }
    double min_spacing() const;
    const std::vector<std::vector<std::size_t>>& node_elements() const { return node_elements_; }
    Vec2 centroid(std::size_t e) const;

    /// Throws MeshError when the name is unknown.
    int tag_id(const std::string& name) const;
    const std::string& tag_name(int id) const;
    bool has_tag(const std::string& name) const;
    /// Indices into boundary_facets() carrying the tag.
    std::vector<std::size_t> facets_with_tag(int id) const;
    /// Sorted unique nodes touched by facets with the tag.
    std::vector<std::size_t> nodes_with_tag(int id) const;

    double facet_length(const BoundaryFacet& f) const;
    Vec2 facet_outward_normal(const BoundaryFacet& f) const;

private:
    std::vector<Vec2> nodes_;
    std::vector<Triangle> elements_;
    std::vector<BoundaryFacet> boundary_facets_;
    std::vector<std::array<std::size_t, 3>> neighbors_;
    std::vector<Edge> edges_;
    std::vector<BoundaryTag> tags_;
    std::vector<double> areas_;
    std::vector<std::array<Vec2, 3>> gradients_;
    std::vector<double> lumped_area_;
    std::vector<double> node_spacing_;
    std::vector<std::vector<std::size_t>> node_elements_;
};

struct AnnulusSpec {
    double inner_radius = 1.0; // cm
    double outer_radius = 2.0; // cm
    std::size_t n_radial = 1;
    std::size_t n_azimuthal = 8;
    std::string inner_tag = "inner";
    std::string outer_tag = "outer";
    double angle_offset = 0.0; ///< rotates the whole node set, radians

    /// Throws MeshError naming the violated constraint.
    void validate() const;
};

/// Structured polar grid, every quad split into two triangles:
/// n_azimuthal * (n_radial + 1) nodes and 2 * n_azimuthal * n_radial elements.
SimplexMesh generate_annulus(const AnnulusSpec& spec);

struct RectangleSpec {
    double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;
    std::size_t nx = 1, ny = 1;
    /// bottom, right, top, left
    std::array<std::string, 4> side_tags{"bottom", "right", "top", "left"};
};

/// Structured rectangle, every cell split along its (lower-left, upper-right)
/// diagonal. Corner facets take the tag of the side they lie on.
SimplexMesh generate_rectangle(const RectangleSpec& spec);

/// Barycentric weights of `point` with respect to element `e`. The weights
/// always sum to one; a negative entry means the point lies outside.
std::array<double, 3> shape_functions(const SimplexMesh& mesh, std::size_t e, const Vec2& point);

inline bool weights_inside(const std::array<double, 3>& w, double eps = kContainmentEps) {
    return w[0] >= -eps && w[1] >= -eps && w[2] >= -eps;
}

/// Lowest-index element containing the point, by exhaustive scan.
std::optional<std::size_t> locate_point_brute_force(const SimplexMesh& mesh, const Vec2& point);

/// Neighbour-to-neighbour walk from `start_element`, stepping across the facet
/// with the most negative weight. Falls back to the exhaustive scan when the
/// walk hits the boundary or cycles. Ties on shared facets/vertices resolve to
/// the lowest element index, matching locate_point_brute_force.
std::optional<std::size_t> locate_point(const SimplexMesh& mesh, std::size_t start_element,
                                        const Vec2& point);

/// Walk statistics for the last call on this thread (tests and diagnostics).
struct LocateStats {
    std::size_t hops = 0;
    bool used_fallback = false;
};
LocateStats last_locate_stats();

} // namespace bcm
