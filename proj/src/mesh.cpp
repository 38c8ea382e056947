#include "bcm/mesh.hpp"

#include <algorithm>
#include <numbers>
#include <set>
#include <sstream>

namespace bcm {

namespace {

thread_local LocateStats g_locate_stats;

std::pair<std::size_t, std::size_t> sorted_pair(std::size_t a, std::size_t b) {
    return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
}

double signed_double_area(const Vec2& a, const Vec2& b, const Vec2& c) {
    return cross(b - a, c - a);
}

} // namespace

SimplexMesh SimplexMesh::build(std::vector<Vec2> nodes, std::vector<Triangle> elements,
                               std::vector<BoundaryTag> tags, const FacetTagMap& facet_tags,
                               int default_tag) {
    SimplexMesh m;
    m.nodes_ = std::move(nodes);
    m.elements_ = std::move(elements);
    m.tags_ = std::move(tags);

    {
        std::set<int> ids;
        std::set<std::string> names;
        for (const auto& t : m.tags_) {
            if (!ids.insert(t.id).second) {
                throw MeshError("duplicate boundary tag id " + std::to_string(t.id));
            }
            if (!names.insert(t.name).second) {
                throw MeshError("duplicate boundary tag name '" + t.name + "'");
            }
        }
    }

    const std::size_t nn = m.nodes_.size();
    const std::size_t ne = m.elements_.size();
    m.areas_.resize(ne);
    m.gradients_.resize(ne);

    for (std::size_t e = 0; e < ne; ++e) {
        auto& tri = m.elements_[e];
        for (auto v : tri) {
            if (v >= nn) {
                throw MeshError("element " + std::to_string(e) + " references node " +
                                std::to_string(v) + " of " + std::to_string(nn));
            }
        }
        if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) {
            throw MeshError("element " + std::to_string(e) + " repeats a node");
        }
        double a2 = signed_double_area(m.nodes_[tri[0]], m.nodes_[tri[1]], m.nodes_[tri[2]]);
        if (a2 < 0.0) {
            std::swap(tri[1], tri[2]);
            a2 = -a2;
        }
        if (a2 == 0.0) {
            throw MeshError("element " + std::to_string(e) + " is degenerate");
        }
        m.areas_[e] = 0.5 * a2;
        for (int k = 0; k < 3; ++k) {
            const Vec2& p1 = m.nodes_[tri[(k + 1) % 3]];
            const Vec2& p2 = m.nodes_[tri[(k + 2) % 3]];
            m.gradients_[e][k] = Vec2{p1.y - p2.y, p2.x - p1.x} / a2;
        }
    }

    // facet -> (element, local facet) incidences
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::pair<std::size_t, int>>> incid;
    for (std::size_t e = 0; e < ne; ++e) {
        const auto& tri = m.elements_[e];
        for (int k = 0; k < 3; ++k) {
            incid[sorted_pair(tri[(k + 1) % 3], tri[(k + 2) % 3])].emplace_back(e, k);
        }
    }

    m.neighbors_.assign(ne, {kNoNeighbor, kNoNeighbor, kNoNeighbor});
    m.edges_.reserve(incid.size());
    for (const auto& [key, owners] : incid) {
        m.edges_.push_back({key.first, key.second});
        if (owners.size() > 2) {
            std::ostringstream os;
            os << "non-manifold facet (" << key.first << ", " << key.second << ") shared by "
               << owners.size() << " elements";
            throw MeshError(os.str());
        }
        if (owners.size() == 2) {
            m.neighbors_[owners[0].first][owners[0].second] = owners[1].first;
            m.neighbors_[owners[1].first][owners[1].second] = owners[0].first;
            continue;
        }
        const auto [e, k] = owners.front();
        const auto& tri = m.elements_[e];
        BoundaryFacet f;
        f.nodes = {tri[(k + 1) % 3], tri[(k + 2) % 3]};
        f.element = e;
        f.local_facet = k;
        if (auto it = facet_tags.find(key); it != facet_tags.end()) {
            f.tag = it->second;
        } else if (default_tag >= 0) {
            f.tag = default_tag;
        } else {
            std::ostringstream os;
            os << "boundary facet (" << key.first << ", " << key.second << ") has no tag";
            throw MeshError(os.str());
        }
        bool known = std::any_of(m.tags_.begin(), m.tags_.end(),
                                 [&](const BoundaryTag& t) { return t.id == f.tag; });
        if (!known) {
            throw MeshError("boundary facet uses undeclared tag id " + std::to_string(f.tag));
        }
        m.boundary_facets_.push_back(f);
    }

    m.lumped_area_.assign(nn, 0.0);
    m.node_elements_.assign(nn, {});
    for (std::size_t e = 0; e < ne; ++e) {
        for (auto v : m.elements_[e]) {
            m.lumped_area_[v] += m.areas_[e] / 3.0;
            m.node_elements_[v].push_back(e);
        }
    }
    m.node_spacing_.assign(nn, std::numeric_limits<double>::infinity());
    for (const auto& ed : m.edges_) {
        const double len = norm(m.nodes_[ed[0]] - m.nodes_[ed[1]]);
        m.node_spacing_[ed[0]] = std::min(m.node_spacing_[ed[0]], len);
        m.node_spacing_[ed[1]] = std::min(m.node_spacing_[ed[1]], len);
    }
    return m;
}

double SimplexMesh::min_spacing() const {
    return *std::min_element(node_spacing_.begin(), node_spacing_.end());
}

Vec2 SimplexMesh::centroid(std::size_t e) const {
    const auto& t = elements_[e];
    return (nodes_[t[0]] + nodes_[t[1]] + nodes_[t[2]]) / 3.0;
}

int SimplexMesh::tag_id(const std::string& name) const {
    for (const auto& t : tags_) {
        if (t.name == name) return t.id;
    }
    throw MeshError("unknown boundary tag '" + name + "'");
}

const std::string& SimplexMesh::tag_name(int id) const {
    for (const auto& t : tags_) {
        if (t.id == id) return t.name;
    }
    throw MeshError("unknown boundary tag id " + std::to_string(id));
}

bool SimplexMesh::has_tag(const std::string& name) const {
    return std::any_of(tags_.begin(), tags_.end(), [&](const BoundaryTag& t) { return t.name == name; });
}

std::vector<std::size_t> SimplexMesh::facets_with_tag(int id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < boundary_facets_.size(); ++i) {
        if (boundary_facets_[i].tag == id) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> SimplexMesh::nodes_with_tag(int id) const {
    std::set<std::size_t> s;
    for (const auto& f : boundary_facets_) {
        if (f.tag == id) s.insert(f.nodes.begin(), f.nodes.end());
    }
    return {s.begin(), s.end()};
}

double SimplexMesh::facet_length(const BoundaryFacet& f) const {
    return norm(nodes_[f.nodes[1]] - nodes_[f.nodes[0]]);
}

Vec2 SimplexMesh::facet_outward_normal(const BoundaryFacet& f) const {
    const Vec2 t = nodes_[f.nodes[1]] - nodes_[f.nodes[0]];
    return Vec2{t.y, -t.x} / norm(t);
}

void AnnulusSpec::validate() const {
    std::vector<std::string> problems;
    if (!(inner_radius > 0.0)) problems.push_back("inner_radius must be positive");
    if (!(outer_radius > inner_radius)) problems.push_back("outer_radius must exceed inner_radius");
    if (n_radial < 1) problems.push_back("n_radial must be at least 1");
    if (n_azimuthal < 3) problems.push_back("n_azimuthal must be at least 3");
    if (inner_tag == outer_tag) problems.push_back("inner and outer tags must differ");
    if (!problems.empty()) {
        std::string msg = "invalid annulus spec:";
        for (const auto& p : problems) msg += " " + p + ";";
        throw MeshError(msg);
    }
}

SimplexMesh generate_annulus(const AnnulusSpec& spec) {
    spec.validate();
    const std::size_t na = spec.n_azimuthal;
    const std::size_t nr = spec.n_radial;
    auto id = [na](std::size_t ring, std::size_t k) { return ring * na + (k % na); };

    std::vector<Vec2> nodes;
    nodes.reserve(na * (nr + 1));
    for (std::size_t j = 0; j <= nr; ++j) {
        const double r = spec.inner_radius +
                         (spec.outer_radius - spec.inner_radius) * static_cast<double>(j) / nr;
        for (std::size_t k = 0; k < na; ++k) {
            const double th = spec.angle_offset + 2.0 * std::numbers::pi * static_cast<double>(k) / na;
            nodes.push_back({r * std::cos(th), r * std::sin(th)});
        }
    }
    // exact radii on the bounding circles, independent of trig round-off
    for (std::size_t k = 0; k < na; ++k) {
        for (std::size_t ring : {std::size_t{0}, nr}) {
            Vec2& p = nodes[id(ring, k)];
            const double r = ring == 0 ? spec.inner_radius : spec.outer_radius;
            p = p * (r / norm(p));
        }
    }

    std::vector<Triangle> elems;
    elems.reserve(2 * na * nr);
    for (std::size_t j = 0; j < nr; ++j) {
        for (std::size_t k = 0; k < na; ++k) {
            const std::size_t a = id(j, k), b = id(j, k + 1), c = id(j + 1, k + 1), d = id(j + 1, k);
            elems.push_back({a, b, c});
            elems.push_back({a, c, d});
        }
    }

    std::vector<BoundaryTag> tags{{spec.inner_tag, 1}, {spec.outer_tag, 2}};
    FacetTagMap facet_tags;
    for (std::size_t k = 0; k < na; ++k) {
        facet_tags[sorted_pair(id(0, k), id(0, k + 1))] = 1;
        facet_tags[sorted_pair(id(nr, k), id(nr, k + 1))] = 2;
    }
    return SimplexMesh::build(std::move(nodes), std::move(elems), std::move(tags), facet_tags, -1);
}

SimplexMesh generate_rectangle(const RectangleSpec& spec) {
    if (spec.nx < 1 || spec.ny < 1 || !(spec.x1 > spec.x0) || !(spec.y1 > spec.y0)) {
        throw MeshError("invalid rectangle spec");
    }
    const std::size_t nx = spec.nx, ny = spec.ny;
    auto id = [nx](std::size_t i, std::size_t j) { return j * (nx + 1) + i; };
    std::vector<Vec2> nodes;
    nodes.reserve((nx + 1) * (ny + 1));
    for (std::size_t j = 0; j <= ny; ++j) {
        for (std::size_t i = 0; i <= nx; ++i) {
            nodes.push_back({spec.x0 + (spec.x1 - spec.x0) * static_cast<double>(i) / nx,
                             spec.y0 + (spec.y1 - spec.y0) * static_cast<double>(j) / ny});
        }
    }
    std::vector<Triangle> elems;
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
            elems.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
            elems.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
        }
    }
    std::vector<BoundaryTag> tags;
    std::vector<int> side_id(4);
    for (int s = 0; s < 4; ++s) {
        auto it = std::find_if(tags.begin(), tags.end(),
                               [&](const BoundaryTag& t) { return t.name == spec.side_tags[s]; });
        if (it == tags.end()) {
            tags.push_back({spec.side_tags[s], static_cast<int>(tags.size()) + 1});
            side_id[s] = tags.back().id;
        } else {
            side_id[s] = it->id;
        }
    }
    FacetTagMap facet_tags;
    for (std::size_t i = 0; i < nx; ++i) {
        facet_tags[sorted_pair(id(i, 0), id(i + 1, 0))] = side_id[0];
        facet_tags[sorted_pair(id(i, ny), id(i + 1, ny))] = side_id[2];
    }
    for (std::size_t j = 0; j < ny; ++j) {
        facet_tags[sorted_pair(id(nx, j), id(nx, j + 1))] = side_id[1];
        facet_tags[sorted_pair(id(0, j), id(0, j + 1))] = side_id[3];
    }
    return SimplexMesh::build(std::move(nodes), std::move(elems), std::move(tags), facet_tags, -1);
}

std::array<double, 3> shape_functions(const SimplexMesh& mesh, std::size_t e, const Vec2& p) {
    const auto& t = mesh.element(e);
    const Vec2& a = mesh.node(t[0]);
    const Vec2& b = mesh.node(t[1]);
    const Vec2& c = mesh.node(t[2]);
    const double inv = 1.0 / (2.0 * mesh.area(e));
    const double w0 = cross(b - p, c - p) * inv;
    const double w1 = cross(c - p, a - p) * inv;
    return {w0, w1, 1.0 - w0 - w1};
}

std::optional<std::size_t> locate_point_brute_force(const SimplexMesh& mesh, const Vec2& point) {
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
        if (weights_inside(shape_functions(mesh, e, point))) return e;
    }
    return std::nullopt;
}

std::optional<std::size_t> locate_point(const SimplexMesh& mesh, std::size_t start_element,
                                        const Vec2& point) {
    g_locate_stats = {};
    if (start_element >= mesh.num_elements()) {
        throw MeshError("locate_point: start element out of range");
    }
    const auto& nbrs = mesh.element_neighbors();
    std::size_t cur = start_element;
    const std::size_t max_hops = mesh.num_elements();
    for (std::size_t hop = 0; hop <= max_hops; ++hop) {
        const auto w = shape_functions(mesh, cur, point);
        if (weights_inside(w)) {
            const double wmin = std::min({w[0], w[1], w[2]});
            if (wmin > 1e-9) return cur;
            // on or next to a shared facet/vertex: lowest containing index wins
            std::size_t best = cur;
            for (auto v : mesh.element(cur)) {
                for (auto e : mesh.node_elements()[v]) {
                    if (e < best && weights_inside(shape_functions(mesh, e, point))) best = e;
                }
            }
            return best;
        }
        const int k = static_cast<int>(std::min_element(w.begin(), w.end()) - w.begin());
        const std::size_t next = nbrs[cur][k];
        if (next == kNoNeighbor) break;
        cur = next;
        ++g_locate_stats.hops;
    }
    g_locate_stats.used_fallback = true;
    return locate_point_brute_force(mesh, point);
}

LocateStats last_locate_stats() { return g_locate_stats; }

} // namespace bcm
