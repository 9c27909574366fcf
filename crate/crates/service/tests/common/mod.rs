#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use polyfind_core::dialogue::{Deployment, Engine, EngineOptions};
use polyfind_core::encoder::hashing::HashingEncoder;
use polyfind_core::encoder::TextEncoder;
use polyfind_core::index::{Entity, Kind, ResponseIndex, ResponsePool};
use polyfind_core::multilingual::TranslationProvider;
use polyfind_service::app::{router, AppState, CityInfo};
use polyfind_service::sessions::SessionStore;
use tokio::net::TcpListener;

pub const CITY: &str = "testville";

pub fn encoder() -> Arc<dyn TextEncoder<f32>> {
    Arc::new(HashingEncoder::<f32>::new(64))
}

/// Three restaurants with disjoint vocabularies.
pub fn pool(entities: usize) -> ResponsePool {
    let texts: [(&str, &str, &[&str]); 3] = [
        ("r0", "Luigi's", &["fresh pasta carbonara", "the lasagne was rich", "wood fired pizza"]),
        ("r1", "Bamboo", &["spicy pad thai noodles", "green curry with jasmine rice", "the satay was smoky"]),
        ("r2", "Casa", &["crispy fish tacos", "the burritos were huge", "guacamole made at the table"]),
    ];
    let mut pool = ResponsePool::new("en");
    for (id, name, lines) in texts.iter().take(entities) {
        let e = pool.add_entity(Entity::new(*id, *name).info());
        for (i, t) in lines.iter().enumerate() {
            pool.push_text(e, if i == 0 { Kind::Menu } else { Kind::Review }, *t);
        }
    }
    pool
}

pub fn index(entities: usize) -> ResponseIndex<f32> {
    ResponseIndex::build(&pool(entities), encoder().as_ref(), None).unwrap()
}

pub fn engine(provider: Option<Arc<dyn TranslationProvider>>) -> Engine<f32> {
    let mut e = Engine::new(CITY, Arc::new(index(3)), encoder(), EngineOptions::default()).unwrap();
    if let Some(p) = provider {
        e = e.with_translator(p);
    }
    e
}

pub fn state(provider: Option<Arc<dyn TranslationProvider>>, ttl: Duration) -> AppState {
    let mut deployment = Deployment::default();
    deployment.insert(engine(provider));
    let cities = BTreeMap::from([(
        CITY.to_string(),
        CityInfo {
            language: "en".into(),
            index_path: None,
            photos_dir: None,
        },
    )]);
    AppState::new(deployment, cities, SessionStore::new(ttl))
}

pub struct Server {
    pub base: String,
    pub app: Arc<AppState>,
    pub client: reqwest::Client,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn create(&self, language: &str) -> String {
        let resp = self
            .client
            .post(self.url("/v1/sessions"))
            .json(&serde_json::json!({"city": CITY, "language": language}))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 201);
        let body: serde_json::Value = resp.json().await.unwrap();
        body["session_id"].as_str().unwrap().to_string()
    }

    pub async fn turn(&self, id: &str, text: &str) -> reqwest::Response {
        self.client
            .post(self.url(&format!("/v1/sessions/{id}/turns")))
            .json(&serde_json::json!({ "text": text }))
            .send()
            .await
            .unwrap()
    }
}

pub async fn start(app: AppState) -> Server {
    let app = Arc::new(app);
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let r = router(Arc::clone(&app));
    tokio::spawn(async move { axum::serve(listener, r).await.unwrap() });
    Server {
        base,
        app,
        client: reqwest::Client::new(),
    }
}
