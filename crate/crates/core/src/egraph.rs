//! Interaction streams, temporal neighbor indexing and stream transforms.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Per-event supervision state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Unlabeled,
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_i8(v: i8) -> Option<Label> {
        match v {
            -1 => Some(Label::Unlabeled),
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Unlabeled => -1,
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }
}

/// One timestamped directed interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
    pub features: Vec<f64>,
    pub label: Label,
}

/// Time-ordered event sequence over a fixed node space.
///
/// For bipartite user/item streams, `num_users` records where item ids start.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    num_nodes: usize,
    num_users: Option<usize>,
    edge_feature_dim: usize,
}

impl EventStream {
    /// Validates and stably sorts `events` by time.
    pub fn new(mut events: Vec<Event>, num_nodes: usize, edge_feature_dim: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(Error::invalid(format!("event {i}: bad timestamp {}", e.t)));
            }
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(Error::invalid(format!(
                    "event {i}: node id out of range ({} -> {}, {num_nodes} nodes)",
                    e.src, e.dst
                )));
            }
            if e.features.len() != edge_feature_dim {
                return Err(Error::invalid(format!(
                    "event {i}: {} features, stream declares {edge_feature_dim}",
                    e.features.len()
                )));
            }
            if e.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("event {i}: non-finite feature")));
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(EventStream {
            events,
            num_nodes,
            num_users: None,
            edge_feature_dim,
        })
    }

    pub fn with_num_users(mut self, num_users: usize) -> Self {
        self.num_users = Some(num_users);
        self
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_users(&self) -> Option<usize> {
        self.num_users
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.edge_feature_dim
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.events.iter().map(|e| e.label)
    }

    fn sub(&self, range: std::ops::Range<usize>) -> EventStream {
        EventStream {
            events: self.events[range].to_vec(),
            ..self.shell()
        }
    }

    fn shell(&self) -> EventStream {
        EventStream {
            events: Vec::new(),
            num_nodes: self.num_nodes,
            num_users: self.num_users,
            edge_feature_dim: self.edge_feature_dim,
        }
    }

    /// Concatenates streams over the same node space, in argument order.
    pub fn concat(parts: &[&EventStream]) -> Result<EventStream> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of no streams"))?;
        let mut out = first.shell();
        for p in parts {
            if p.num_nodes != first.num_nodes || p.edge_feature_dim != first.edge_feature_dim {
                return Err(Error::invalid("concat: streams differ in node space or feature dim"));
            }
            if let (Some(last), Some(next)) = (out.events.last(), p.events.first()) {
                if next.t < last.t {
                    return Err(Error::invalid("concat: parts overlap in time"));
                }
            }
            out.events.extend_from_slice(&p.events);
        }
        Ok(out)
    }
}

// ---- CSV ------------------------------------------------------------------

/// Reads a JODIE-layout CSV: `user_id,item_id,timestamp,state_label,f...`
/// with one header line. Items are shifted past the users into one id space.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e.to_string()))?;

    let mut rows = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            csv_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 4 {
            return Err(csv_err(path, line, format!("{} fields, need at least 4", record.len())));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(csv_err(path, line, format!("{} fields, expected {w}", record.len())))
            }
            _ => {}
        }
        let id = |i: usize, what: &str| {
            record[i]
                .parse::<usize>()
                .map_err(|_| csv_err(path, line, format!("bad {what} {:?}", &record[i])))
        };
        let num = |i: usize| {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| csv_err(path, line, format!("bad number {:?}", &record[i])))
        };
        let user = id(0, "user id")?;
        let item = id(1, "item id")?;
        let t = num(2)?;
        if t < 0.0 {
            return Err(csv_err(path, line, format!("negative timestamp {t}")));
        }
        let label = match num(3)? {
            0.0 => Label::Normal,
            1.0 => Label::Anomalous,
            v => return Err(csv_err(path, line, format!("state_label {v} is not 0 or 1"))),
        };
        let features = (4..record.len()).map(num).collect::<Result<Vec<_>>>()?;
        rows.push((user, item, t, label, features));
    }

    let num_users = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let num_items = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let dim = width.map_or(0, |w| w - 4);
    let events = rows
        .into_iter()
        .map(|(u, i, t, label, features)| Event {
            src: u,
            dst: num_users + i,
            t,
            features,
            label,
        })
        .collect();
    Ok(EventStream::new(events, num_users + num_items, dim)?.with_num_users(num_users))
}

/// Writes a bipartite stream in the layout [`ingest_csv`] reads.
pub fn write_csv(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let num_users = stream
        .num_users
        .ok_or_else(|| Error::invalid("write_csv needs a bipartite stream (num_users unset)"))?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e.to_string()))?;
    let mut header = vec![
        "user_id".to_string(),
        "item_id".into(),
        "timestamp".into(),
        "state_label".into(),
    ];
    header.extend((0..stream.edge_feature_dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, 1, e.to_string()))?;
    for (row, e) in stream.events.iter().enumerate() {
        if e.src >= num_users || e.dst < num_users {
            return Err(Error::invalid(format!("event {row} is not user -> item")));
        }
        let label = match e.label {
            Label::Unlabeled => return Err(Error::invalid(format!("event {row} is unlabeled"))),
            l => l.as_i8(),
        };
        let mut rec = vec![
            e.src.to_string(),
            (e.dst - num_users).to_string(),
            e.t.to_string(),
            label.to_string(),
        ];
        rec.extend(e.features.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|err| csv_err(path, row + 2, err.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(path: &Path, row: usize, message: String) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    }
}

// ---- splitting and label dropping ----------------------------------------

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Clone, Debug)]
pub struct ChronoSplit {
    pub train: EventStream,
    pub val: EventStream,
    pub test: EventStream,
}

/// Splits at `floor(f_train * m)` and `floor((f_train + f_val) * m)` events.
pub fn chronological_split(stream: &EventStream, fractions: (f64, f64, f64)) -> Result<ChronoSplit> {
    let (a, b, c) = fractions;
    if stream.is_empty() {
        return Err(Error::invalid("cannot split an empty stream"));
    }
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must sum to 1")));
    }
    let m = stream.len() as f64;
    // the nudge keeps e.g. 0.7 * 10 from flooring to 6
    let first = ((a * m + 1e-9).floor() as usize).min(stream.len());
    let second = (((a + b) * m + 1e-9).floor() as usize).clamp(first, stream.len());
    Ok(ChronoSplit {
        train: stream.sub(0..first),
        val: stream.sub(first..second),
        test: stream.sub(second..stream.len()),
    })
}

/// Replaces exactly `floor(p * L)` of the `L` labeled events with
/// [`Label::Unlabeled`], chosen by a seeded shuffle.
pub fn drop_labels(stream: &EventStream, p: f64, seed: u64) -> Result<EventStream> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("drop ratio {p} outside [0, 1]")));
    }
    let mut labeled: Vec<usize> = stream
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label.is_labeled())
        .map(|(i, _)| i)
        .collect();
    let count = ((p * labeled.len() as f64 + 1e-9).floor() as usize).min(labeled.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    let mut out = stream.clone();
    for &i in &labeled[..count] {
        out.events[i].label = Label::Unlabeled;
    }
    Ok(out)
}

// ---- temporal adjacency ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjEntry {
    pub neighbor: NodeId,
    pub event: usize,
    pub t: f64,
}

/// Per-node, time-sorted incidence lists. Every event is listed under both
/// of its endpoints.
#[derive(Clone, Debug)]
pub struct TemporalAdjacency {
    lists: Vec<Vec<AdjEntry>>,
}

impl TemporalAdjacency {
    pub fn build(stream: &EventStream) -> Self {
        let mut lists = vec![Vec::new(); stream.num_nodes];
        for (i, e) in stream.events.iter().enumerate() {
            lists[e.src].push(AdjEntry { neighbor: e.dst, event: i, t: e.t });
            if e.dst != e.src {
                lists[e.dst].push(AdjEntry { neighbor: e.src, event: i, t: e.t });
            }
        }
        TemporalAdjacency { lists }
    }

    pub fn num_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn history(&self, node: NodeId) -> &[AdjEntry] {
        self.lists.get(node).map_or(&[], Vec::as_slice)
    }

    /// Entries of `node` with timestamp strictly below `t`.
    pub fn before(&self, node: NodeId, t: f64) -> &[AdjEntry] {
        let list = self.history(node);
        &list[..list.partition_point(|e| e.t < t)]
    }
}

/// Up to `k` most recent interactions of `node` strictly before `t`,
/// most recent first.
pub fn temporal_neighbors(adj: &TemporalAdjacency, node: NodeId, t: f64, k: usize) -> Vec<AdjEntry> {
    adj.before(node, t).iter().rev().take(k).copied().collect()
}

/// How each hop picks its neighbors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborStrategy {
    #[default]
    Recent,
    Uniform,
}

/// One node of a sampled computation tree.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeEntry {
    pub node: NodeId,
    /// Time at which this entry's own neighborhood is queried.
    pub time: f64,
    /// Features of the edge linking this entry to its parent (zeros at the root).
    pub features: Vec<f64>,
    /// Parent query time minus this entry's interaction time.
    pub dt: f64,
    /// Index into the previous layer.
    pub parent: usize,
    /// Position in a dense `per_hop`-ary layout of the layer.
    pub slot: usize,
}

/// Layered temporal computation tree rooted at `(node, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub layers: Vec<Vec<TreeEntry>>,
    pub per_hop: usize,
}

impl Subgraph {
    pub fn root(&self) -> &TreeEntry {
        &self.layers[0][0]
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sample_subgraph<R: Rng + ?Sized>(
    stream: &EventStream,
    adj: &TemporalAdjacency,
    node: NodeId,
    t: f64,
    hops: usize,
    per_hop: usize,
    strategy: NeighborStrategy,
    rng: &mut R,
) -> Result<Subgraph> {
    if hops == 0 || per_hop == 0 {
        return Err(Error::invalid("sample_subgraph needs hops >= 1 and per_hop >= 1"));
    }
    let dim = stream.edge_feature_dim;
    let mut layers = vec![vec![TreeEntry {
        node,
        time: t,
        features: vec![0.0; dim],
        dt: 0.0,
        parent: 0,
        slot: 0,
    }]];
    for _ in 0..hops {
        let prev = layers.last().expect("root layer");
        let mut next = Vec::new();
        for (pi, parent) in prev.iter().enumerate() {
            let picked = match strategy {
                NeighborStrategy::Recent => temporal_neighbors(adj, parent.node, parent.time, per_hop),
                NeighborStrategy::Uniform => {
                    let hist = adj.before(parent.node, parent.time);
                    let mut idx = index::sample(rng, hist.len(), per_hop.min(hist.len())).into_vec();
                    idx.sort_unstable_by(|a, b| b.cmp(a));
                    idx.into_iter().map(|i| hist[i]).collect()
                }
            };
            for (rank, e) in picked.into_iter().enumerate() {
                next.push(TreeEntry {
                    node: e.neighbor,
                    time: e.t,
                    features: stream.events[e.event].features.clone(),
                    dt: parent.time - e.t,
                    parent: pi,
                    slot: parent.slot * per_hop + rank,
                });
            }
        }
        if next.is_empty() {
            break;
        }
        layers.push(next);
    }
    Ok(Subgraph { layers, per_hop })
}

/// Event stream bundled with its adjacency index.
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    pub stream: EventStream,
    pub adj: TemporalAdjacency,
}

impl TemporalGraph {
    pub fn new(stream: EventStream) -> Self {
        let adj = TemporalAdjacency::build(&stream);
        TemporalGraph { stream, adj }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        node: NodeId,
        t: f64,
        hops: usize,
        per_hop: usize,
        strategy: NeighborStrategy,
        rng: &mut R,
    ) -> Result<Subgraph> {
        sample_subgraph(&self.stream, &self.adj, node, t, hops, per_hop, strategy, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn ev(src: usize, dst: usize, t: f64) -> Event {
        Event { src, dst, t, features: vec![t], label: Label::Normal }
    }

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_sorts_and_offsets_items() {
        let f = csv_file(
            "user_id,item_id,timestamp,state_label,f0\n\
             0,2,5,0,0.5\n1,0,1,1,0.1\n0,1,3,0,0.3\n",
        );
        let s = ingest_csv(f.path()).unwrap();
        let ts: Vec<f64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![1.0, 3.0, 5.0]);
        assert_eq!(s.num_nodes(), 5);
        assert_eq!(s.num_users(), Some(2));
        assert_eq!(s.events()[0].dst, 2);
        assert_eq!(s.events()[0].label, Label::Anomalous);
        assert_eq!(s.edge_feature_dim(), 1);
        assert!(s.labels().all(Label::is_labeled));
    }

    #[test]
    fn ingest_rejects_bad_rows_with_row_number() {
        for body in [
            "u,i,t,l,f\n0,0,1,0,1\n0,0,2,0\n",
            "u,i,t,l\n0,0,abc,0\n",
            "u,i,t,l\n0,0,1,0\n0,0,-4,0\n",
            "u,i,t,l\n0,0,1,2\n",
        ] {
            let f = csv_file(body);
            match ingest_csv(f.path()) {
                Err(Error::Csv { row, .. }) => assert!(row >= 2, "{body}: row {row}"),
                other => panic!("{body}: {other:?}"),
            }
        }
    }

    #[test]
    fn split_sizes() {
        for (m, sizes) in [(10, (7, 1, 2)), (20, (14, 3, 3))] {
            let s = EventStream::new((0..m).map(|i| ev(0, 1, i as f64)).collect(), 2, 1).unwrap();
            let sp = chronological_split(&s, DEFAULT_SPLIT).unwrap();
            assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), sizes);
            let max_train = sp.train.events().last().unwrap().t;
            assert!(max_train <= sp.val.events()[0].t);
            let back = EventStream::concat(&[&sp.train, &sp.val, &sp.test]).unwrap();
            assert_eq!(back, s);
        }
        let empty = EventStream::new(vec![], 2, 1).unwrap();
        assert!(chronological_split(&empty, DEFAULT_SPLIT).is_err());
        let s = EventStream::new(vec![ev(0, 1, 0.0)], 2, 1).unwrap();
        assert!(chronological_split(&s, (0.5, 0.2, 0.2)).is_err());
    }

    #[test]
    fn neighbor_queries() {
        let s = EventStream::new(vec![ev(0, 1, 1.0), ev(0, 2, 2.0), ev(0, 3, 3.0)], 4, 1).unwrap();
        let adj = TemporalAdjacency::build(&s);
        let n = temporal_neighbors(&adj, 0, 2.5, 2);
        assert_eq!(n.iter().map(|e| e.t).collect::<Vec<_>>(), vec![2.0, 1.0]);
        assert!(temporal_neighbors(&adj, 0, 1.0, 2).is_empty());
        assert_eq!(temporal_neighbors(&adj, 0, 10.0, 10).len(), 3);
        // both directions are indexed
        assert_eq!(temporal_neighbors(&adj, 3, 10.0, 5)[0].neighbor, 0);
    }

    #[test]
    fn subgraph_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let events = (0..25).map(|i| ev(0, 1 + i, i as f64)).collect();
        let s = EventStream::new(events, 27, 1).unwrap();
        let g = TemporalGraph::new(s);

        let lone = g.sample(26, 100.0, 2, 20, NeighborStrategy::Recent, &mut rng).unwrap();
        assert_eq!(lone.layers.len(), 1);

        let tree = g.sample(0, 100.0, 2, 20, NeighborStrategy::Recent, &mut rng).unwrap();
        assert_eq!(tree.layers[1].len(), 20);
        let times: Vec<f64> = tree.layers[1].iter().map(|e| e.time).collect();
        assert_eq!(times, (5..25).rev().map(|i| i as f64).collect::<Vec<_>>());
        assert!(tree.depth() <= 2);
        // each item's only earlier interaction is the one that led here
        assert!(tree.layers.len() == 2);
        assert_eq!(tree.layers[1][0].dt, 100.0 - 24.0);
    }

    #[test]
    fn uniform_strategy_respects_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let events = (0..30).map(|i| ev(0, 1 + (i % 4), i as f64)).collect();
        let g = TemporalGraph::new(EventStream::new(events, 5, 1).unwrap());
        let tree = g.sample(0, 17.5, 2, 6, NeighborStrategy::Uniform, &mut rng).unwrap();
        assert_eq!(tree.layers[1].len(), 6);
        for layer in tree.layers.windows(2) {
            for child in &layer[1] {
                assert!(child.time < layer[0][child.parent].time);
            }
        }
    }

    #[test]
    fn drop_labels_contract() {
        let events: Vec<Event> = (0..100).map(|i| ev(0, 1, i as f64)).collect();
        let s = EventStream::new(events, 2, 1).unwrap();
        assert_eq!(drop_labels(&s, 0.0, 1).unwrap(), s);
        assert!(drop_labels(&s, 1.0, 1).unwrap().labels().all(|l| l == Label::Unlabeled));
        let a = drop_labels(&s, 0.5, 9).unwrap();
        let b = drop_labels(&s, 0.5, 9).unwrap();
        assert_eq!(a.labels().filter(|l| *l == Label::Unlabeled).count(), 50);
        assert_eq!(a, b);
        assert_eq!(drop_labels(&a, 0.0, 4).unwrap(), a);
        assert!(s.labels().all(Label::is_labeled));
        assert!(drop_labels(&s, 1.5, 0).is_err());
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec((0usize..6, 0usize..6, 0u32..50), 1..100).prop_map(|raw| {
            let events = raw.into_iter().map(|(a, b, t)| ev(a, b, t as f64)).collect();
            EventStream::new(events, 6, 1).unwrap()
        })
    }

    proptest! {
        #[test]
        fn neighbors_match_linear_scan(s in arb_stream(), node in 0usize..6, t in 0.0f64..55.0, k in 1usize..8) {
            let adj = TemporalAdjacency::build(&s);
            let got = temporal_neighbors(&adj, node, t, k);
            let mut oracle: Vec<(usize, f64)> = s.events().iter().enumerate()
                .filter(|(_, e)| (e.src == node || e.dst == node) && e.t < t)
                .map(|(i, e)| (i, e.t))
                .collect();
            oracle.reverse();
            oracle.truncate(k);
            let got: Vec<(usize, f64)> = got.iter().map(|e| (e.event, e.t)).collect();
            prop_assert_eq!(got, oracle);
        }
    }
}
