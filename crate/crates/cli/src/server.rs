//! Read-only HTTP retrieval service over an embedding snapshot.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use hierlens_core::data::{Catalog, HierarchyTree};
use hierlens_core::eval::Scorer;
use hierlens_core::loss::Direction;
use hierlens_core::trainer::EmbeddingTable;
use serde::Serialize;
use tower_http::cors::{Any, CorsLayer};

/// Immutable state shared by every request.
pub struct Snapshot {
    pub table: EmbeddingTable,
    pub catalog: Catalog,
    tree_json: String,
    pub default_k: usize,
    /// Threshold in radians used when a request names none.
    pub default_threshold: f64,
}

impl Snapshot {
    pub fn new(table: EmbeddingTable, catalog: Catalog, tree: &HierarchyTree, default_k: usize) -> hierlens_core::Result<Self> {
        Ok(Snapshot {
            table,
            catalog,
            tree_json: tree.to_json()?,
            default_k,
            default_threshold: 0.0,
        })
    }

    fn node(&self, index: usize) -> NodeRecord {
        let id = self.table.id(index);
        let info = self.catalog.get(id);
        NodeRecord {
            id: id.to_string(),
            label: info.and_then(|n| n.label.clone()),
            group: info.map(|n| n.group.to_string()),
            norm: self.table.tangent_norm(index),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct NodeRecord {
    pub id: String,
    pub label: Option<String>,
    pub group: Option<String>,
    pub norm: f64,
}

#[derive(Debug, Serialize)]
pub struct RetrievedRecord {
    #[serde(flatten)]
    pub node: NodeRecord,
    /// `beta1` for parent-to-child queries, `alpha2` for child-to-parent.
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct RetrieveResponse {
    pub query: String,
    pub direction: &'static str,
    pub threshold: f64,
    pub k: usize,
    pub results: Vec<RetrievedRecord>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

pub fn router(snapshot: Arc<Snapshot>, cors_origin: &str) -> Router {
    let cors = CorsLayer::new().allow_methods([Method::GET]);
    let cors = match cors_origin {
        "*" => cors.allow_origin(Any),
        origin => match HeaderValue::from_str(origin) {
            Ok(v) => cors.allow_origin(v),
            Err(_) => {
                log::warn!("ignoring malformed CORS origin {origin:?}");
                cors
            }
        },
    };
    Router::new()
        .route("/nodes", get(nodes))
        .route("/retrieve", get(retrieve))
        .route("/tree", get(tree))
        .layer(cors)
        .with_state(snapshot)
}

async fn nodes(State(s): State<Arc<Snapshot>>) -> Json<Vec<NodeRecord>> {
    Json((0..s.table.len()).map(|i| s.node(i)).collect())
}

async fn tree(State(s): State<Arc<Snapshot>>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], s.tree_json.clone())
}

async fn retrieve(
    State(s): State<Arc<Snapshot>>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<RetrieveResponse>, ApiError> {
    if let Some(unknown) = params
        .keys()
        .find(|k| !matches!(k.as_str(), "query" | "direction" | "threshold" | "k"))
    {
        return Err(bad_request(format!("unknown parameter {unknown:?}")));
    }
    let query = params.get("query").ok_or_else(|| bad_request("missing parameter \"query\""))?;
    let (direction, direction_name) = match params.get("direction").map(String::as_str) {
        None | Some("p2c") => (Direction::ParentToChild, "p2c"),
        Some("c2p") => (Direction::ChildToParent, "c2p"),
        Some(other) => return Err(bad_request(format!("direction must be p2c or c2p, got {other:?}"))),
    };
    let threshold = match params.get("threshold") {
        None => s.default_threshold,
        Some(t) => match t.parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => return Err(bad_request(format!("threshold must be a number of radians, got {t:?}"))),
        },
    };
    let k = match params.get("k") {
        None => s.default_k,
        Some(v) => match v.parse::<usize>() {
            Ok(k) if k > 0 => k,
            _ => return Err(bad_request(format!("k must be a positive integer, got {v:?}"))),
        },
    };
    let q = s
        .table
        .index_of(query)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown node {query:?}")))?;

    let scorer = Scorer::new(&s.table);
    let candidates: Vec<usize> = (0..s.table.len()).filter(|&j| j != q).collect();
    let ranked = scorer.rank(q, &candidates, direction, Default::default(), candidates.len());
    let mut results: Vec<RetrievedRecord> = ranked
        .items
        .into_iter()
        .filter(|item| item.score >= threshold && threshold <= PI)
        .take(k)
        .map(|item| {
            let j = s.table.index_of(&item.id).expect("ranked ids come from the table");
            RetrievedRecord {
                node: s.node(j),
                score: item.score,
            }
        })
        .collect();
    results.sort_by(|a, b| a.node.norm.total_cmp(&b.node.norm).then_with(|| a.node.id.cmp(&b.node.id)));
    Ok(Json(RetrieveResponse {
        query: query.clone(),
        direction: direction_name,
        threshold,
        k,
        results,
    }))
}
