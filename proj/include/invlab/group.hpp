#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "invlab/rng.hpp"
#include "invlab/vecmath.hpp"

namespace invlab {

using ElementId = std::size_t;

// Linear action of one group element on input vectors. Signed permutations
// (perm + per-coordinate scale) are kept exact; anything else is a dense
// row-major matrix. Semantics: y[i] = scale[i] * x[perm[i]], or y = M x.
struct ElementAction {
    bool is_perm = true;
    std::vector<std::size_t> perm;  // source index per output coordinate
    std::vector<double> scale;      // per output coordinate
    std::vector<double> matrix;     // row-major dim x dim, used when !is_perm

    Vec apply(const Vec& x) const {
        const std::size_t d = is_perm ? perm.size() : scale_dim();
        if (x.size() != d) throw std::invalid_argument("act: input dimension mismatch");
        Vec y(d);
        if (is_perm) {
            for (std::size_t i = 0; i < d; ++i) y[i] = scale[i] * x[perm[i]];
        } else {
            for (std::size_t i = 0; i < d; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += matrix[i * d + j] * x[j];
                y[i] = s;
            }
        }
        return y;
    }

    // y = M^T x, the transpose action used by dual_action.
    Vec apply_transpose(const Vec& x) const {
        const std::size_t d = is_perm ? perm.size() : scale_dim();
        if (x.size() != d) throw std::invalid_argument("dual_action: dimension mismatch");
        Vec y(d, 0.0);
        if (is_perm) {
            // row i has entry scale[i] at column perm[i]
            for (std::size_t i = 0; i < d; ++i) y[perm[i]] += scale[i] * x[i];
        } else {
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) y[j] += matrix[i * d + j] * x[i];
        }
        return y;
    }

    std::size_t dim() const { return is_perm ? perm.size() : scale_dim(); }

private:
    std::size_t scale_dim() const {
        std::size_t n = matrix.size();
        std::size_t d = static_cast<std::size_t>(std::lround(std::sqrt(double(n))));
        if (d * d != n) throw std::logic_error("dense action matrix is not square");
        return d;
    }
};

// A finite group stored extensionally (full element list + composition table)
// together with a linear action on input vectors. Extensional storage keeps
// exact symmetrization and exhaustive axiom checks tractable; every group we
// ship is small.
class GroupAction {
public:
    GroupAction(std::string name, std::size_t n_elements, std::size_t input_dim,
                std::vector<ElementId> compose_table, std::vector<ElementAction> actions,
                std::vector<std::string> element_names = {})
        : name_(std::move(name)),
          n_(n_elements),
          dim_(input_dim),
          table_(std::move(compose_table)),
          actions_(std::move(actions)),
          elem_names_(std::move(element_names)) {
        if (n_ == 0) throw std::invalid_argument("group must have at least one element");
        if (table_.size() != n_ * n_) throw std::invalid_argument("composition table size mismatch");
        if (actions_.size() != n_) throw std::invalid_argument("one action per element required");
        for (const auto& a : actions_)
            if (a.dim() != dim_) throw std::invalid_argument("action dimension mismatch");
        if (elem_names_.empty()) {
            elem_names_.resize(n_);
            for (std::size_t i = 0; i < n_; ++i) elem_names_[i] = "g" + std::to_string(i);
        }
        validate();
    }

    const std::string& name() const { return name_; }
    std::size_t size() const { return n_; }
    std::size_t input_dim() const { return dim_; }
    ElementId identity() const { return identity_; }
    ElementId inverse(ElementId g) const { return check(g), inverse_[g]; }
    const std::string& element_name(ElementId g) const { return check(g), elem_names_[g]; }
    const ElementAction& action(ElementId g) const { return check(g), actions_[g]; }

    std::optional<ElementId> find_element(const std::string& nm) const {
        for (std::size_t i = 0; i < n_; ++i)
            if (elem_names_[i] == nm) return i;
        return std::nullopt;
    }

    ElementId compose(ElementId g, ElementId h) const {
        check(g);
        check(h);
        return table_[g * n_ + h];
    }

    Vec act(ElementId g, const Vec& x) const {
        check(g);
        return actions_[g].apply(x);
    }

    // w' with w'^T x == w^T act(g, x) for all x, i.e. the transpose of g's
    // action matrix applied to w. Averaged over the whole group this equals
    // the dual-representation average E[rho*_G] since g -> g^{-1} is a
    // bijection of G.
    Vec dual_action(ElementId g, const Vec& w) const {
        check(g);
        return actions_[g].apply_transpose(w);
    }

    ElementId sample_uniform(SplitRng& rng) const { return rng.below(n_); }

    bool action_is_permutation() const {
        for (const auto& a : actions_)
            if (!a.is_perm) return false;
        return true;
    }

    // Orbit {gx : g in G}, deduplicated. Permutation actions introduce no
    // rounding so they deduplicate by exact equality; dense actions use an
    // absolute tolerance of 1e-12 per coordinate.
    std::vector<Vec> orbit(const Vec& x) const {
        std::vector<Vec> out;
        const double tol = action_is_permutation() ? 0.0 : 1e-12;
        for (ElementId g = 0; g < n_; ++g) {
            Vec y = act(g, x);
            bool dup = false;
            for (const auto& z : out) {
                if (tol == 0.0 ? y == z : max_abs_diff(y, z) <= tol) {
                    dup = true;
                    break;
                }
            }
            if (!dup) out.push_back(std::move(y));
        }
        return out;
    }

    // Lexicographically minimal element of orbit(x); idempotent and constant
    // on orbits, serving as the canonical representative Phi.
    Vec canonical_representative(const Vec& x) const {
        Vec best = act(0, x);
        for (ElementId g = 1; g < n_; ++g) {
            Vec y = act(g, x);
            if (std::lexicographical_compare(y.begin(), y.end(), best.begin(), best.end()))
                best = std::move(y);
        }
        return best;
    }

    // Dense input_dim x input_dim matrix of g's action (row-major).
    std::vector<double> action_matrix(ElementId g) const {
        check(g);
        std::vector<double> m(dim_ * dim_, 0.0);
        const auto& a = actions_[g];
        if (a.is_perm) {
            for (std::size_t i = 0; i < dim_; ++i) m[i * dim_ + a.perm[i]] = a.scale[i];
        } else {
            m = a.matrix;
        }
        return m;
    }

    // |S|^{-1} sum over S of the transposed action matrices: the linear map
    // realizing w -> average of dual_action(g, w). With S = all elements this
    // is the projection onto the invariant weight subspace.
    std::vector<double> average_dual_matrix(const std::vector<ElementId>& subset) const {
        if (subset.empty()) throw std::invalid_argument("average_dual_matrix: empty element set");
        std::vector<double> m(dim_ * dim_, 0.0);
        for (ElementId g : subset) {
            auto a = action_matrix(g);
            for (std::size_t i = 0; i < dim_; ++i)
                for (std::size_t j = 0; j < dim_; ++j) m[j * dim_ + i] += a[i * dim_ + j];
        }
        double inv = 1.0 / static_cast<double>(subset.size());
        for (double& v : m) v *= inv;
        return m;
    }

    std::vector<ElementId> all_elements() const {
        std::vector<ElementId> v(n_);
        std::iota(v.begin(), v.end(), ElementId{0});
        return v;
    }

    nlohmann::json to_json() const;
    static std::shared_ptr<const GroupAction> from_json(const nlohmann::json& j);

private:
    void check(ElementId g) const {
        if (g >= n_) throw std::domain_error("unknown group element id");
    }

    // Group-axiom validation: closure, two-sided identity, two-sided inverses,
    // associativity (exhaustive for |G| <= 64, sampled otherwise), and the
    // action homomorphism act(g, act(h, e_i)) == act(gh, e_i) on basis vectors.
    void validate() {
        for (ElementId v : table_)
            if (v >= n_) throw std::invalid_argument("composition table not closed");

        bool found = false;
        for (ElementId e = 0; e < n_; ++e) {
            bool ok = true;
            for (ElementId g = 0; g < n_ && ok; ++g)
                ok = table_[e * n_ + g] == g && table_[g * n_ + e] == g;
            if (ok) {
                identity_ = e;
                found = true;
                break;
            }
        }
        if (!found) throw std::invalid_argument("group has no two-sided identity");

        inverse_.assign(n_, identity_);
        for (ElementId g = 0; g < n_; ++g) {
            bool ok = false;
            for (ElementId h = 0; h < n_; ++h) {
                if (table_[g * n_ + h] == identity_ && table_[h * n_ + g] == identity_) {
                    inverse_[g] = h;
                    ok = true;
                    break;
                }
            }
            if (!ok) throw std::invalid_argument("element without two-sided inverse");
        }

        auto assoc = [&](ElementId a, ElementId b, ElementId c) {
            return table_[table_[a * n_ + b] * n_ + c] == table_[a * n_ + table_[b * n_ + c]];
        };
        if (n_ <= 64) {
            for (ElementId a = 0; a < n_; ++a)
                for (ElementId b = 0; b < n_; ++b)
                    for (ElementId c = 0; c < n_; ++c)
                        if (!assoc(a, b, c))
                            throw std::invalid_argument("composition table not associative");
        } else {
            SplitRng rng(0x5eedu ^ n_);
            for (int t = 0; t < 4000; ++t)
                if (!assoc(rng.below(n_), rng.below(n_), rng.below(n_)))
                    throw std::invalid_argument("composition table not associative");
        }

        const double tol = 1e-9;
        auto check_pair = [&](ElementId g, ElementId h) {
            ElementId gh = table_[g * n_ + h];
            for (std::size_t i = 0; i < dim_; ++i) {
                Vec e(dim_, 0.0);
                e[i] = 1.0;
                Vec lhs = actions_[g].apply(actions_[h].apply(e));
                Vec rhs = actions_[gh].apply(e);
                if (max_abs_diff(lhs, rhs) > tol)
                    throw std::invalid_argument("action is not a homomorphism");
            }
        };
        if (n_ <= 64) {
            for (ElementId g = 0; g < n_; ++g)
                for (ElementId h = 0; h < n_; ++h) check_pair(g, h);
        } else {
            SplitRng rng(0xac710au ^ n_);
            for (int t = 0; t < 1000; ++t) check_pair(rng.below(n_), rng.below(n_));
        }
    }

    std::string name_;
    std::size_t n_;
    std::size_t dim_;
    std::vector<ElementId> table_;
    std::vector<ElementAction> actions_;
    std::vector<std::string> elem_names_;
    std::vector<ElementId> inverse_;
    ElementId identity_ = 0;
};

using GroupPtr = std::shared_ptr<const GroupAction>;

// One draw from the disintegrated representation of an invariant distribution:
// realized_input = act(applied_element, representative).
struct OrbitSample {
    Vec representative;
    ElementId applied_element;
    Vec realized_input;
};

// --- JSON group definition file ---------------------------------------------
// Schema: {name, n_elements, compose (row-major table),
//          action: [{perm: [...], scale: [...]} | {matrix: [...]}]}
// Dense "matrix" entries are accepted for non-permutation representations.
// The group axioms are re-validated on load by the constructor.

inline nlohmann::json GroupAction::to_json() const {
    nlohmann::json j;
    j["name"] = name_;
    j["n_elements"] = n_;
    j["compose"] = table_;
    nlohmann::json acts = nlohmann::json::array();
    for (const auto& a : actions_) {
        nlohmann::json e;
        if (a.is_perm) {
            e["perm"] = a.perm;
            e["scale"] = a.scale;
        } else {
            e["matrix"] = a.matrix;
        }
        acts.push_back(std::move(e));
    }
    j["action"] = std::move(acts);
    return j;
}

inline std::shared_ptr<const GroupAction> GroupAction::from_json(const nlohmann::json& j) {
    const std::string nm = j.at("name").get<std::string>();
    const std::size_t n = j.at("n_elements").get<std::size_t>();
    std::vector<ElementId> table = j.at("compose").get<std::vector<ElementId>>();
    std::vector<ElementAction> actions;
    std::size_t dim = 0;
    for (const auto& e : j.at("action")) {
        ElementAction a;
        if (e.contains("perm")) {
            a.is_perm = true;
            a.perm = e.at("perm").get<std::vector<std::size_t>>();
            a.scale = e.contains("scale") ? e.at("scale").get<std::vector<double>>()
                                          : std::vector<double>(a.perm.size(), 1.0);
            if (a.scale.size() != a.perm.size())
                throw std::invalid_argument("group json: perm/scale length mismatch");
            for (std::size_t p : a.perm)
                if (p >= a.perm.size()) throw std::invalid_argument("group json: perm out of range");
        } else {
            a.is_perm = false;
            a.matrix = e.at("matrix").get<std::vector<double>>();
        }
        if (dim == 0) dim = a.dim();
        actions.push_back(std::move(a));
    }
    return std::make_shared<GroupAction>(nm, n, dim, std::move(table), std::move(actions));
}

// --- Shipped group builders --------------------------------------------------

namespace detail {

// Build the composition table from movement permutations: element g is the
// abstract permutation pi_g of {0..d-1}, stored with action perm[i] =
// pi^{-1}(i) so that act follows the left-action convention
// act(compose(g,h), x) = act(g, act(h, x)).
inline GroupPtr group_from_movement_perms(std::string name,
                                          const std::vector<std::vector<std::size_t>>& moves,
                                          std::size_t dim,
                                          std::vector<std::string> names = {}) {
    const std::size_t n = moves.size();
    std::map<std::vector<std::size_t>, ElementId> index;
    for (std::size_t i = 0; i < n; ++i) index[moves[i]] = i;

    std::vector<ElementId> table(n * n);
    for (std::size_t g = 0; g < n; ++g) {
        for (std::size_t h = 0; h < n; ++h) {
            std::vector<std::size_t> prod(dim);
            for (std::size_t i = 0; i < dim; ++i) prod[i] = moves[g][moves[h][i]];
            auto it = index.find(prod);
            if (it == index.end()) throw std::logic_error("movement set not closed");
            table[g * n + h] = it->second;
        }
    }

    std::vector<ElementAction> actions(n);
    for (std::size_t g = 0; g < n; ++g) {
        actions[g].is_perm = true;
        actions[g].perm.resize(dim);
        actions[g].scale.assign(dim, 1.0);
        for (std::size_t i = 0; i < dim; ++i) actions[g].perm[moves[g][i]] = i;  // perm = pi^{-1}
    }
    return std::make_shared<GroupAction>(std::move(name), n, dim, std::move(table),
                                         std::move(actions), std::move(names));
}

inline std::vector<std::vector<std::size_t>> all_perms(std::size_t k) {
    std::vector<std::size_t> p(k);
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::vector<std::vector<std::size_t>> out;
    do {
        out.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
}

inline std::string perm_name(const std::vector<std::size_t>& p) {
    std::string s = "[";
    for (std::size_t i = 0; i < p.size(); ++i) s += (i ? " " : "") + std::to_string(p[i]);
    return s + "]";
}

} // namespace detail

inline GroupPtr trivial_group(std::size_t dim) {
    return detail::group_from_movement_perms(
        "trivial" + std::to_string(dim),
        {[&] {
            std::vector<std::size_t> id(dim);
            std::iota(id.begin(), id.end(), std::size_t{0});
            return id;
        }()},
        dim, {"e"});
}

// C2 acting by global sign flip x -> -x.
inline GroupPtr sign_flip_group(std::size_t dim) {
    std::vector<std::size_t> id(dim);
    std::iota(id.begin(), id.end(), std::size_t{0});
    std::vector<ElementAction> actions(2);
    for (int g = 0; g < 2; ++g) {
        actions[g].is_perm = true;
        actions[g].perm = id;
        actions[g].scale.assign(dim, g == 0 ? 1.0 : -1.0);
    }
    std::vector<ElementId> table = {0, 1, 1, 0};
    return std::make_shared<GroupAction>("c2_sign" + std::to_string(dim), 2, dim,
                                         std::move(table), std::move(actions),
                                         std::vector<std::string>{"e", "neg"});
}

// S_k permuting k slots of width slot_dim (slot j occupies coordinates
// [j*slot_dim, (j+1)*slot_dim)). slot_dim = 1 is plain coordinate permutation.
inline GroupPtr symmetric_group(std::size_t k, std::size_t slot_dim = 1) {
    if (k < 1 || k > 6) throw std::invalid_argument("symmetric_group supports 1 <= k <= 6");
    auto perms = detail::all_perms(k);
    const std::size_t dim = k * slot_dim;
    std::vector<std::vector<std::size_t>> moves;
    std::vector<std::string> names;
    moves.reserve(perms.size());
    for (const auto& p : perms) {
        std::vector<std::size_t> mv(dim);
        for (std::size_t slot = 0; slot < k; ++slot)
            for (std::size_t c = 0; c < slot_dim; ++c)
                mv[slot * slot_dim + c] = p[slot] * slot_dim + c;
        moves.push_back(std::move(mv));
        names.push_back(detail::perm_name(p));
    }
    std::string nm = "s" + std::to_string(k);
    if (slot_dim != 1) nm += "x" + std::to_string(slot_dim);
    return detail::group_from_movement_perms(nm, moves, dim, names);
}

// Direct product of symmetric groups on consecutive slot blocks:
// S_{b1} x S_{b2} x ... acting on (sum b_i) slots of width slot_dim.
inline GroupPtr block_symmetric_group(const std::vector<std::size_t>& blocks,
                                      std::size_t slot_dim = 1) {
    if (blocks.empty()) throw std::invalid_argument("block_symmetric_group: no blocks");
    std::size_t k = 0;
    for (std::size_t b : blocks) {
        if (b < 1 || b > 6) throw std::invalid_argument("block sizes must be in [1,6]");
        k += b;
    }
    // enumerate tuples of per-block permutations
    std::vector<std::vector<std::vector<std::size_t>>> per_block;
    for (std::size_t b : blocks) per_block.push_back(detail::all_perms(b));
    std::vector<std::vector<std::size_t>> moves;
    std::vector<std::size_t> idx(blocks.size(), 0);
    const std::size_t dim = k * slot_dim;
    while (true) {
        std::vector<std::size_t> mv(dim);
        std::size_t base = 0;
        for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
            const auto& p = per_block[bi][idx[bi]];
            for (std::size_t s = 0; s < blocks[bi]; ++s)
                for (std::size_t c = 0; c < slot_dim; ++c)
                    mv[(base + s) * slot_dim + c] = (base + p[s]) * slot_dim + c;
            base += blocks[bi];
        }
        moves.push_back(std::move(mv));
        std::size_t bi = 0;
        for (; bi < blocks.size(); ++bi) {
            if (++idx[bi] < per_block[bi].size()) break;
            idx[bi] = 0;
        }
        if (bi == blocks.size()) break;
    }
    std::string nm = "s_blocks";
    for (std::size_t b : blocks) nm += "_" + std::to_string(b);
    if (slot_dim != 1) nm += "x" + std::to_string(slot_dim);
    return detail::group_from_movement_perms(nm, moves, dim);
}

// C4 rotating a p x p grid (flattened row-major) by multiples of 90 degrees.
// r90 is the clockwise quarter turn: dest(r,c) = src(p-1-c, r).
inline GroupPtr grid_rotation_group(std::size_t p) {
    if (p < 2) throw std::invalid_argument("grid_rotation_group needs p >= 2");
    const std::size_t dim = p * p;
    std::vector<std::size_t> r90(dim);
    for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) r90[(p - 1 - c) * p + r] = r * p + c;  // movement map
    std::vector<std::size_t> id(dim);
    std::iota(id.begin(), id.end(), std::size_t{0});
    auto comp = [&](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
        std::vector<std::size_t> out(dim);
        for (std::size_t i = 0; i < dim; ++i) out[i] = a[b[i]];
        return out;
    };
    std::vector<std::vector<std::size_t>> moves = {id, r90, comp(r90, r90), comp(r90, comp(r90, r90))};
    return detail::group_from_movement_perms("c4_grid" + std::to_string(p), moves, dim,
                                             {"e", "r90", "r180", "r270"});
}

// C_m cyclically shifting m coordinates: element j moves coordinate i to i+j mod m.
inline GroupPtr cyclic_shift_group(std::size_t m) {
    if (m < 1) throw std::invalid_argument("cyclic_shift_group needs m >= 1");
    std::vector<std::vector<std::size_t>> moves(m, std::vector<std::size_t>(m));
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < m; ++i) moves[j][i] = (i + j) % m;
    return detail::group_from_movement_perms("cshift" + std::to_string(m), moves, m);
}

// C_n acting on R^2 by planar rotations of 2*pi*j/n (dense matrices; the
// finite stand-in for the continuous rotation group). n up to 360.
inline GroupPtr planar_rotation_group(std::size_t n) {
    if (n < 1 || n > 360) throw std::invalid_argument("planar_rotation_group supports 1 <= n <= 360");
    std::vector<ElementId> table(n * n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) table[a * n + b] = (a + b) % n;
    std::vector<ElementAction> actions(n);
    std::vector<std::string> names(n);
    for (std::size_t j = 0; j < n; ++j) {
        double th = 2.0 * 3.14159265358979323846 * static_cast<double>(j) / static_cast<double>(n);
        actions[j].is_perm = false;
        actions[j].matrix = {std::cos(th), -std::sin(th), std::sin(th), std::cos(th)};
        names[j] = "rot" + std::to_string(j);
    }
    return std::make_shared<GroupAction>("c" + std::to_string(n) + "_rot2d", n, 2,
                                         std::move(table), std::move(actions), std::move(names));
}

} // namespace invlab
