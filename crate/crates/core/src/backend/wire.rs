//! JSON bodies of the scoring protocol.
//!
//! - `POST /v1/score`: request `{context, continuation, needs, top_k?}`,
//!   response `{tokens: [{token_text, realized_logprob, entropy,
//!   mean_vocab_logprob}], token_count, vocab_size, model_fingerprint}`.
//! - `GET /v1/info`: `{model_fingerprint, vocab_size, max_context}`.
//! - errors: a non-2xx status with `{error: {code, message}}`.
//!
//! Numbers are written in shortest round-trip form, so a decoded value is
//! bit-identical to the encoded one. Non-finite values cannot be encoded.

use serde::{Deserialize, Serialize};

use super::{ScoreRequest, ScoreResponse, Statistic, TokenScore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ProtocolError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScoreRequest {
    pub context: String,
    pub continuation: String,
    pub needs: Vec<Statistic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
}

impl From<&ScoreRequest> for WireScoreRequest {
    fn from(r: &ScoreRequest) -> Self {
        WireScoreRequest {
            context: r.context.clone(),
            continuation: r.continuation.clone(),
            needs: r.needs.iter().copied().collect(),
            top_k: None,
        }
    }
}

/// A decoded score response and the fingerprint of the model that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReply {
    pub response: ScoreResponse,
    pub model_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct ReplyBody {
    tokens: Vec<TokenScore>,
    token_count: usize,
    vocab_size: usize,
    model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub model_fingerprint: String,
    pub vocab_size: usize,
    pub max_context: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

pub fn encode_score_request(request: &ScoreRequest) -> String {
    serde_json::to_string(&WireScoreRequest::from(request)).expect("request serialisation cannot fail")
}

pub fn decode_score_request(body: &[u8]) -> Result<WireScoreRequest, ProtocolError> {
    let req: WireScoreRequest =
        serde_json::from_slice(body).map_err(|e| ProtocolError(format!("score request: {e}")))?;
    if req.continuation.is_empty() {
        return Err(ProtocolError("score request: empty continuation".into()));
    }
    if req.needs.is_empty() {
        return Err(ProtocolError("score request: needs must not be empty".into()));
    }
    Ok(req)
}

pub fn encode_score_response(response: &ScoreResponse, model_fingerprint: &str) -> Result<String, ProtocolError> {
    let finite = response
        .tokens
        .iter()
        .all(|t| t.realized_logprob.is_finite() && t.entropy.is_finite() && t.mean_vocab_logprob.is_finite());
    if !finite {
        return Err(ProtocolError("non-finite statistic cannot be encoded".into()));
    }
    let body = ReplyBody {
        tokens: response.tokens.clone(),
        token_count: response.token_count,
        vocab_size: response.vocab_size,
        model_fingerprint: model_fingerprint.to_owned(),
    };
    Ok(serde_json::to_string(&body).expect("response serialisation cannot fail"))
}

/// Decode a score response and check every invariant that does not depend on
/// the request.
pub fn decode_score_response(body: &[u8]) -> Result<ScoreReply, ProtocolError> {
    let reply: ReplyBody =
        serde_json::from_slice(body).map_err(|e| ProtocolError(format!("score response: {e}")))?;
    let response = ScoreResponse {
        tokens: reply.tokens,
        token_count: reply.token_count,
        vocab_size: reply.vocab_size,
    };
    response.check_intrinsic().map_err(|e| ProtocolError(format!("score response: {e}")))?;
    Ok(ScoreReply { response, model_fingerprint: reply.model_fingerprint })
}

/// Decode a score response for a known continuation.
pub fn decode_score_response_for(body: &[u8], continuation: &str) -> Result<ScoreReply, ProtocolError> {
    let reply = decode_score_response(body)?;
    reply.response.check(continuation).map_err(|e| ProtocolError(format!("score response: {e}")))?;
    Ok(reply)
}

pub fn decode_info(body: &[u8]) -> Result<InfoResponse, ProtocolError> {
    let info: InfoResponse =
        serde_json::from_slice(body).map_err(|e| ProtocolError(format!("info response: {e}")))?;
    if info.vocab_size < 2 {
        return Err(ProtocolError(format!("info response: vocab_size {} < 2", info.vocab_size)));
    }
    Ok(info)
}

pub fn decode_error(body: &[u8]) -> Option<ErrorDetail> {
    serde_json::from_slice::<ErrorBody>(body).ok().map(|b| b.error)
}

pub fn encode_error(code: &str, message: &str) -> String {
    serde_json::to_string(&ErrorBody {
        error: ErrorDetail { code: code.to_owned(), message: message.to_owned() },
    })
    .expect("error serialisation cannot fail")
}
