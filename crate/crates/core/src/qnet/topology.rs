//! Static QKD sub-network topology and routing.
//!
//! Config format, one declaration per line (`#` starts a comment):
//!
//! ```text
//! node <id> trusted|untrusted
//! link <id> <nodeA> <nodeB> up|down static|switched <delay_s>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path as FsPath;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInfo {
    pub id: String,
    pub trusted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Static,
    Switched,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkInfo {
    pub id: String,
    pub a: String,
    pub b: String,
    pub operational: bool,
    pub kind: LinkKind,
    /// Setup delay in simulated milliseconds; only counted for switched links.
    pub switch_delay_ms: u64,
}

impl LinkInfo {
    pub fn other_end(&self, node: &str) -> Option<&str> {
        if self.a == node {
            Some(&self.b)
        } else if self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }

    pub fn setup_delay_ms(&self) -> u64 {
        match self.kind {
            LinkKind::Static => 0,
            LinkKind::Switched => self.switch_delay_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Direct,
    MultiHop,
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::Direct => "direct",
            PathKind::MultiHop => "multi-hop",
        })
    }
}

/// A route: `nodes[i]` and `nodes[i + 1]` are joined by `hops[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub hops: Vec<String>,
    pub nodes: Vec<String>,
    pub kind: PathKind,
}

impl Path {
    pub fn src(&self) -> &str {
        &self.nodes[0]
    }

    pub fn dst(&self) -> &str {
        self.nodes.last().expect("path has endpoints")
    }

    pub fn intermediates(&self) -> &[String] {
        &self.nodes[1..self.nodes.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionInfo {
    pub possible: bool,
    pub kind: Option<PathKind>,
    pub intermediates: Vec<String>,
    /// True when the route passes through nodes that see relayed key.
    pub trust_required: bool,
    pub setup_delay_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    nodes: BTreeMap<String, NodeInfo>,
    links: BTreeMap<String, LinkInfo>,
}

fn parse_delay_ms(s: &str) -> Option<u64> {
    let secs: f64 = s.parse().ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| (secs * 1000.0).round() as u64)
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: &str, trusted: bool) -> Result<()> {
        if self.nodes.contains_key(id) {
            return Err(Error::InvalidParameter(format!("node {id} declared twice")));
        }
        self.nodes.insert(
            id.to_string(),
            NodeInfo {
                id: id.to_string(),
                trusted,
            },
        );
        Ok(())
    }

    pub fn add_link(&mut self, link: LinkInfo) -> Result<()> {
        for end in [&link.a, &link.b] {
            if !self.nodes.contains_key(end) {
                return Err(Error::UnknownNode(end.clone()));
            }
        }
        if link.a == link.b {
            return Err(Error::InvalidParameter(format!("link {} is a self-loop", link.id)));
        }
        if self.links.contains_key(&link.id) {
            return Err(Error::InvalidParameter(format!("link {} declared twice", link.id)));
        }
        if let Some(other) = self.link_between(&link.a, &link.b) {
            return Err(Error::InvalidParameter(format!(
                "link {} parallels existing link {} between {} and {}",
                link.id, other.id, link.a, link.b
            )));
        }
        self.links.insert(link.id.clone(), link);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut topo = Topology::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line, msg };
            let f: Vec<&str> = body.split_whitespace().collect();
            match f[0] {
                "node" => {
                    let [_, id, trust] = f[..] else {
                        return Err(err("expected `node <id> trusted|untrusted`".into()));
                    };
                    let trusted = match trust {
                        "trusted" => true,
                        "untrusted" => false,
                        other => return Err(err(format!("unknown trust level {other}"))),
                    };
                    topo.add_node(id, trusted).map_err(|e| err(e.to_string()))?;
                }
                "link" => {
                    let [_, id, a, b, state, kind, delay] = f[..] else {
                        return Err(err(
                            "expected `link <id> <nodeA> <nodeB> up|down static|switched <delay_s>`".into(),
                        ));
                    };
                    let operational = match state {
                        "up" => true,
                        "down" => false,
                        other => return Err(err(format!("unknown link state {other}"))),
                    };
                    let kind = match kind {
                        "static" => LinkKind::Static,
                        "switched" => LinkKind::Switched,
                        other => return Err(err(format!("unknown link kind {other}"))),
                    };
                    let switch_delay_ms =
                        parse_delay_ms(delay).ok_or_else(|| err(format!("bad delay {delay}")))?;
                    topo.add_link(LinkInfo {
                        id: id.into(),
                        a: a.into(),
                        b: b.into(),
                        operational,
                        kind,
                        switch_delay_ms,
                    })
                    .map_err(|e| err(e.to_string()))?;
                }
                other => return Err(err(format!("unknown declaration {other}"))),
            }
        }
        Ok(topo)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn node(&self, id: &str) -> Result<&NodeInfo> {
        self.nodes.get(id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn link(&self, id: &str) -> Result<&LinkInfo> {
        self.links.get(id).ok_or_else(|| Error::UnknownLink(id.to_string()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeInfo> {
        self.nodes.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkInfo> {
        self.links.values()
    }

    pub fn link_between(&self, a: &str, b: &str) -> Option<&LinkInfo> {
        self.links
            .values()
            .find(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
    }

    pub fn set_operational(&mut self, link_id: &str, up: bool) -> Result<()> {
        self.links
            .get_mut(link_id)
            .map(|l| l.operational = up)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))
    }

    /// Fewest-hop route over operational links. Among equally short routes
    /// the one whose link-id sequence sorts first wins.
    pub fn route(&self, src: &str, dst: &str) -> Result<Path> {
        self.node(src)?;
        self.node(dst)?;
        if src == dst {
            return Err(Error::InvalidParameter(format!("route from {src} to itself")));
        }
        // best[v] = lexicographically smallest hop sequence among shortest
        // routes to v; a shortest route's prefix is a shortest route, so
        // extending the per-node optimum layer by layer is exact.
        let mut best: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
        best.insert(src, (Vec::new(), vec![src]));
        let mut frontier: BTreeSet<&str> = BTreeSet::from([src]);
        while !frontier.is_empty() && !best.contains_key(dst) {
            let mut next: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
            for &u in &frontier {
                let (hops, nodes) = &best[u];
                for l in self.links.values().filter(|l| l.operational) {
                    let Some(v) = l.other_end(u) else { continue };
                    if best.contains_key(v) {
                        continue;
                    }
                    let mut cand = hops.clone();
                    cand.push(&l.id);
                    let better = next.get(v).is_none_or(|(h, _)| cand < *h);
                    if better {
                        let mut n = nodes.clone();
                        n.push(v);
                        next.insert(v, (cand, n));
                    }
                }
            }
            frontier = next.keys().copied().collect();
            best.extend(next);
        }
        let (hops, nodes) = best.remove(dst).ok_or_else(|| Error::NoRoute {
            src: src.to_string(),
            dst: dst.to_string(),
        })?;
        Ok(Path {
            kind: if hops.len() == 1 { PathKind::Direct } else { PathKind::MultiHop },
            hops: hops.into_iter().map(String::from).collect(),
            nodes: nodes.into_iter().map(String::from).collect(),
        })
    }

    /// Never fails: unknown or identical endpoints are simply not possible.
    pub fn connection_info(&self, src: &str, dst: &str) -> ConnectionInfo {
        match self.route(src, dst) {
            Ok(path) => ConnectionInfo {
                possible: true,
                kind: Some(path.kind),
                trust_required: path.kind == PathKind::MultiHop,
                setup_delay_ms: path
                    .hops
                    .iter()
                    .map(|h| self.links[h].setup_delay_ms())
                    .sum(),
                intermediates: path.intermediates().to_vec(),
            },
            Err(_) => ConnectionInfo {
                possible: false,
                kind: None,
                intermediates: Vec::new(),
                trust_required: false,
                setup_delay_ms: 0,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CHAIN: &str = "\
node 1 trusted
node 2 trusted
node 3 trusted
node 4 trusted
link A-B 1 2 up static 0
link C-D 2 3 up static 0
link E-F 3 4 up static 0
";

    #[test]
    fn chain_route() {
        let t = Topology::parse(CHAIN).unwrap();
        let p = t.route("1", "4").unwrap();
        assert_eq!(p.hops, ["A-B", "C-D", "E-F"]);
        assert_eq!(p.kind, PathKind::MultiHop);
        assert_eq!(p.intermediates(), ["2", "3"]);
        let d = t.route("2", "3").unwrap();
        assert_eq!(d.kind, PathKind::Direct);
        assert_eq!(d.hops, ["C-D"]);
        assert!(d.intermediates().is_empty());
    }

    #[test]
    fn down_link_breaks_chain() {
        let mut t = Topology::parse(CHAIN).unwrap();
        t.set_operational("C-D", false).unwrap();
        assert!(matches!(t.route("1", "4"), Err(Error::NoRoute { .. })));
        let info = t.connection_info("1", "4");
        assert!(!info.possible);
        assert!(t.connection_info("1", "2").possible);
    }

    #[test]
    fn connection_info_chain() {
        let t = Topology::parse(CHAIN).unwrap();
        let info = t.connection_info("1", "4");
        assert!(info.possible && info.trust_required);
        assert_eq!(info.kind, Some(PathKind::MultiHop));
        assert_eq!(info.intermediates, ["2", "3"]);
        assert_eq!(info.setup_delay_ms, 0);
    }

    #[test]
    fn switched_delays_add_up() {
        let t = Topology::parse(
            "node x trusted\nnode y trusted\nnode z trusted\n\
             link p x y up switched 20\nlink q y z up switched 20\n",
        )
        .unwrap();
        assert_eq!(t.connection_info("x", "z").setup_delay_ms, 20_000 + 20_000);
        assert_eq!(t.connection_info("x", "y").setup_delay_ms, 20_000);
    }

    #[test]
    fn route_errors() {
        let t = Topology::parse(CHAIN).unwrap();
        assert!(matches!(t.route("1", "9"), Err(Error::UnknownNode(_))));
        assert!(t.route("1", "1").is_err());
        assert!(!t.connection_info("1", "1").possible);
    }

    #[test]
    fn tie_break_on_link_ids() {
        // two 2-hop routes s-a-d and s-b-d
        let t = Topology::parse(
            "node s trusted\nnode a trusted\nnode b trusted\nnode d trusted\n\
             link m s a up static 0\nlink z a d up static 0\n\
             link n s b up static 0\nlink c b d up static 0\n",
        )
        .unwrap();
        assert_eq!(t.route("s", "d").unwrap().hops, ["m", "z"]);
    }

    #[test]
    fn parse_errors_carry_line() {
        let bad = "node 1 trusted\n\nlink L 1 2 up static 0\n";
        match Topology::parse(bad) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Topology::parse("node 1 maybe"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(Topology::parse("node 1 trusted\nnode 2 trusted\nlink a 1 2 up static 0\nlink b 2 1 up static 0").is_err());
        assert!(Topology::parse("node 1 trusted\nnode 2 trusted\nlink a 1 2 up static -3").is_err());
    }

    fn naive_route(t: &Topology, src: &str, dst: &str) -> Option<Vec<String>> {
        // enumerate simple paths, keep the shortest / lexicographically first
        fn walk(t: &Topology, at: &str, dst: &str, seen: &mut Vec<String>, hops: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
            if at == dst {
                out.push(hops.clone());
                return;
            }
            for l in t.links().filter(|l| l.operational) {
                if let Some(v) = l.other_end(at) {
                    if !seen.iter().any(|s| s == v) {
                        seen.push(v.to_string());
                        hops.push(l.id.clone());
                        walk(t, v, dst, seen, hops, out);
                        hops.pop();
                        seen.pop();
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(t, src, dst, &mut vec![src.to_string()], &mut Vec::new(), &mut out);
        out.into_iter().min_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)))
    }

    fn random_topology(n: usize, edges: &[(usize, usize, bool)], names: &[u8]) -> Topology {
        let mut t = Topology::new();
        for i in 0..n {
            t.add_node(&format!("n{i}"), true).unwrap();
        }
        for (k, &(a, b, up)) in edges.iter().enumerate() {
            let (a, b) = (a % n, b % n);
            if a == b || t.link_between(&format!("n{a}"), &format!("n{b}")).is_some() {
                continue;
            }
            t.add_link(LinkInfo {
                id: format!("{}{k:02}", names[k] as char),
                a: format!("n{a}"),
                b: format!("n{b}"),
                operational: up,
                kind: LinkKind::Static,
                switch_delay_ms: 0,
            })
            .unwrap();
        }
        t
    }

    proptest! {
        #[test]
        fn route_matches_exhaustive_search(
            n in 2usize..7,
            edges in prop::collection::vec((0usize..7, 0usize..7, prop::bool::weighted(0.8)), 0..12),
            names in prop::collection::vec(b'a'..=b'e', 12),
        ) {
            let t = random_topology(n, &edges, &names);
            for s in 0..n {
                for d in 0..n {
                    if s == d { continue; }
                    let (s, d) = (format!("n{s}"), format!("n{d}"));
                    let got = t.route(&s, &d).ok().map(|p| p.hops);
                    prop_assert_eq!(got, naive_route(&t, &s, &d));
                }
            }
        }

        #[test]
        fn order_preserving_relabel_keeps_route(
            n in 2usize..7,
            edges in prop::collection::vec((0usize..7, 0usize..7, Just(true)), 0..12),
            names in prop::collection::vec(b'a'..=b'e', 12),
        ) {
            let t = random_topology(n, &edges, &names);
            // prefixing every id with the same string preserves their order
            let mut r = Topology::new();
            for node in t.nodes() {
                r.add_node(&node.id, node.trusted).unwrap();
            }
            for l in t.links() {
                r.add_link(LinkInfo { id: format!("x-{}", l.id), ..l.clone() }).unwrap();
            }
            for s in 0..n {
                for d in 0..n {
                    if s == d { continue; }
                    let (s, d) = (format!("n{s}"), format!("n{d}"));
                    let a = t.route(&s, &d).ok().map(|p| p.hops);
                    let b = r.route(&s, &d).ok().map(|p| {
                        p.hops.into_iter().map(|h| h[2..].to_string()).collect::<Vec<_>>()
                    });
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
