//! Metric graphs and measures on them.
//!
//! Edges are parametrized by arclength from tail to head. The outward
//! normal at an edge endpoint is stored as a scalar sign: `+1` at the head,
//! `-1` at the tail.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::NetworkError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: String,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    pub tail: usize,
    pub head: usize,
    pub length: f64,
}

/// Raw vertex record, as read from a problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexSpec {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

/// Raw edge record. Endpoints refer to vertex ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub id: String,
    pub tail: String,
    pub head: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub vertices: Vec<VertexSpec>,
    pub edges: Vec<EdgeSpec>,
}

/// A finite connected metric graph. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Network {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    incidence: Vec<Vec<usize>>,
}

/// End of an edge as seen from one of its vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum End {
    Tail,
    Head,
}

impl End {
    pub fn sign(self) -> f64 {
        match self {
            End::Tail => -1.0,
            End::Head => 1.0,
        }
    }
}

pub fn build_network(spec: &NetworkSpec) -> Result<Network, NetworkError> {
    if spec.vertices.is_empty() {
        return Err(NetworkError::Empty("vertex"));
    }
    if spec.edges.is_empty() {
        return Err(NetworkError::Empty("edge"));
    }

    let mut index = HashMap::with_capacity(spec.vertices.len());
    let mut vertices = Vec::with_capacity(spec.vertices.len());
    for (i, v) in spec.vertices.iter().enumerate() {
        if index.insert(v.id.clone(), i).is_some() {
            return Err(NetworkError::DuplicateId(v.id.clone()));
        }
        if !(v.x.is_finite() && v.y.is_finite()) {
            return Err(NetworkError::NonFiniteCoordinate(v.id.clone()));
        }
        vertices.push(Vertex { id: v.id.clone(), position: [v.x, v.y] });
    }

    let mut seen_edges = HashMap::with_capacity(spec.edges.len());
    let mut edges = Vec::with_capacity(spec.edges.len());
    let mut incidence = vec![Vec::new(); vertices.len()];
    for (j, e) in spec.edges.iter().enumerate() {
        if seen_edges.insert(e.id.clone(), j).is_some() {
            return Err(NetworkError::DuplicateId(e.id.clone()));
        }
        let lookup = |name: &str| {
            index.get(name).copied().ok_or_else(|| NetworkError::DanglingVertex { edge: e.id.clone(), vertex: name.to_string() })
        };
        let tail = lookup(&e.tail)?;
        let head = lookup(&e.head)?;
        if tail == head {
            return Err(NetworkError::SelfLoop(e.id.clone()));
        }
        let length = match e.length {
            Some(l) => l,
            None => {
                let [x0, y0] = vertices[tail].position;
                let [x1, y1] = vertices[head].position;
                (x1 - x0).hypot(y1 - y0)
            }
        };
        if !(length > 0.0 && length.is_finite()) {
            return Err(NetworkError::NonPositiveLength { edge: e.id.clone(), length });
        }
        incidence[tail].push(j);
        incidence[head].push(j);
        edges.push(Edge { id: e.id.clone(), tail, head, length });
    }

    let net = Network { vertices, edges, incidence };
    let comps = net.component_count();
    if comps > 1 {
        return Err(NetworkError::Disconnected(comps));
    }
    Ok(net)
}

impl Network {
    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges incident to vertex `i`, in edge order.
    pub fn incident(&self, i: usize) -> &[usize] {
        &self.incidence[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.incidence[i].len()
    }

    /// Which end of edge `j` sits at vertex `i`.
    pub fn end_at(&self, i: usize, j: usize) -> Option<End> {
        let e = self.edges.get(j)?;
        if e.tail == i {
            Some(End::Tail)
        } else if e.head == i {
            Some(End::Head)
        } else {
            None
        }
    }

    pub fn vertex_index(&self, id: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v.id == id)
    }

    pub fn edge_index(&self, id: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.id == id)
    }

    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            vertices: self.vertices.iter().map(|v| VertexSpec { id: v.id.clone(), x: v.position[0], y: v.position[1] }).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeSpec {
                    id: e.id.clone(),
                    tail: self.vertices[e.tail].id.clone(),
                    head: self.vertices[e.head].id.clone(),
                    length: Some(e.length),
                })
                .collect(),
        }
    }

    fn component_count(&self) -> usize {
        let n = self.vertices.len();
        let mut label = vec![usize::MAX; n];
        let mut comps = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = comps;
            stack.push(s);
            while let Some(v) = stack.pop() {
                for &j in &self.incidence[v] {
                    let e = &self.edges[j];
                    let w = if e.tail == v { e.head } else { e.tail };
                    if label[w] == usize::MAX {
                        label[w] = comps;
                        stack.push(w);
                    }
                }
            }
            comps += 1;
        }
        comps
    }
}

pub fn incidence_sign(net: &Network, i: usize, j: usize) -> Result<f64, NetworkError> {
    net.end_at(i, j).map(End::sign).ok_or(NetworkError::NotIncident { vertex: i, edge: j })
}

/// Cell averages on every edge plus point masses on every vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeasure {
    pub edge_densities: Vec<Vec<f64>>,
    pub vertex_masses: Vec<f64>,
}

impl NetworkMeasure {
    pub fn zeros(cells: &[usize], n_vertices: usize) -> Self {
        NetworkMeasure { edge_densities: cells.iter().map(|&n| vec![0.0; n]).collect(), vertex_masses: vec![0.0; n_vertices] }
    }

    pub fn check_shape(&self, net: &Network) -> Result<(), NetworkError> {
        if self.edge_densities.len() != net.n_edges() {
            return Err(NetworkError::Shape(format!("{} edge density vectors for {} edges", self.edge_densities.len(), net.n_edges())));
        }
        if self.vertex_masses.len() != net.n_vertices() {
            return Err(NetworkError::Shape(format!("{} vertex masses for {} vertices", self.vertex_masses.len(), net.n_vertices())));
        }
        if let Some(j) = self.edge_densities.iter().position(|d| d.is_empty()) {
            return Err(NetworkError::Shape(format!("edge {j} has no cells")));
        }
        Ok(())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.edge_densities.iter().flatten().chain(&self.vertex_masses).all(|&x| x >= 0.0)
    }

    pub fn edge_mass(&self, net: &Network, j: usize) -> f64 {
        let d = &self.edge_densities[j];
        let dx = net.edges[j].length / d.len() as f64;
        d.iter().sum::<f64>() * dx
    }
}

pub fn total_mass(mu: &NetworkMeasure, net: &Network) -> Result<f64, NetworkError> {
    mu.check_shape(net)?;
    let edges: f64 = (0..net.n_edges()).map(|j| mu.edge_mass(net, j)).sum();
    Ok(edges + mu.vertex_masses.iter().sum::<f64>())
}

/// Single-edge and star-shaped networks used by tests, the demo and the CLI fixtures.
pub mod fixtures {
    use super::*;

    pub fn segment(length: f64) -> Network {
        build_network(&NetworkSpec {
            vertices: vec![VertexSpec { id: "V1".into(), x: 0.0, y: 0.0 }, VertexSpec { id: "V2".into(), x: length, y: 0.0 }],
            edges: vec![EdgeSpec { id: "E1".into(), tail: "V1".into(), head: "V2".into(), length: Some(length) }],
        })
        .expect("segment is a valid network")
    }

    /// Three unit edges meeting at `V1`: E1 runs V2→V1, E2 and E3 leave V1.
    pub fn y_graph() -> Network {
        let h = 3f64.sqrt() / 2.0;
        build_network(&NetworkSpec {
            vertices: vec![
                VertexSpec { id: "V1".into(), x: 0.0, y: 0.0 },
                VertexSpec { id: "V2".into(), x: -1.0, y: 0.0 },
                VertexSpec { id: "V3".into(), x: 0.5, y: h },
                VertexSpec { id: "V4".into(), x: 0.5, y: -h },
            ],
            edges: vec![
                EdgeSpec { id: "E1".into(), tail: "V2".into(), head: "V1".into(), length: None },
                EdgeSpec { id: "E2".into(), tail: "V1".into(), head: "V3".into(), length: None },
                EdgeSpec { id: "E3".into(), tail: "V1".into(), head: "V4".into(), length: None },
            ],
        })
        .expect("Y graph is a valid network")
    }

    /// Two unit edges sharing the middle vertex: V1→V2→V3.
    pub fn path2() -> Network {
        build_network(&NetworkSpec {
            vertices: vec![
                VertexSpec { id: "V1".into(), x: 0.0, y: 0.0 },
                VertexSpec { id: "V2".into(), x: 1.0, y: 0.0 },
                VertexSpec { id: "V3".into(), x: 2.0, y: 0.0 },
            ],
            edges: vec![
                EdgeSpec { id: "E1".into(), tail: "V1".into(), head: "V2".into(), length: None },
                EdgeSpec { id: "E2".into(), tail: "V2".into(), head: "V3".into(), length: None },
            ],
        })
        .expect("path is a valid network")
    }
}
