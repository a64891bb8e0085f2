//! Prompt templates and placeholder rendering.
//!
//! Placeholders are `{name}` tokens. Only names declared for a template are
//! substituted; every other brace (the JSON examples inside the reasoning
//! prompts) is literal text. Substitution is single-pass, so bound values
//! that happen to contain `{name}` are never expanded again.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Outline,
    InitialAnswer,
    GapIdentification,
    SubqueryGeneration,
    NodeAnswer,
    Feedback,
    Refine,
    BranchSynthesis,
    ReasoningSystem,
    Step1,
    Step2,
    Step3a,
    Step3b,
    /// Evidence sufficiency verdict before citation expansion.
    Sufficiency,
    /// Does a cited reference support a sentence.
    CitationSupport,
    /// Does a sentence make a claim that needs a citation.
    CitationWorthiness,
    /// Is an uncited sentence supported by the whole reference context.
    ContextSupport,
}

impl TemplateId {
    pub const ALL: [TemplateId; 17] = [
        TemplateId::Outline,
        TemplateId::InitialAnswer,
        TemplateId::GapIdentification,
        TemplateId::SubqueryGeneration,
        TemplateId::NodeAnswer,
        TemplateId::Feedback,
        TemplateId::Refine,
        TemplateId::BranchSynthesis,
        TemplateId::ReasoningSystem,
        TemplateId::Step1,
        TemplateId::Step2,
        TemplateId::Step3a,
        TemplateId::Step3b,
        TemplateId::Sufficiency,
        TemplateId::CitationSupport,
        TemplateId::CitationWorthiness,
        TemplateId::ContextSupport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Outline => "outline",
            TemplateId::InitialAnswer => "initial_answer",
            TemplateId::GapIdentification => "gap_identification",
            TemplateId::SubqueryGeneration => "subquery_generation",
            TemplateId::NodeAnswer => "node_answer",
            TemplateId::Feedback => "feedback",
            TemplateId::Refine => "refine",
            TemplateId::BranchSynthesis => "branch_synthesis",
            TemplateId::ReasoningSystem => "reasoning_system",
            TemplateId::Step1 => "step1",
            TemplateId::Step2 => "step2",
            TemplateId::Step3a => "step3a",
            TemplateId::Step3b => "step3b",
            TemplateId::Sufficiency => "sufficiency",
            TemplateId::CitationSupport => "citation_support",
            TemplateId::CitationWorthiness => "citation_worthiness",
            TemplateId::ContextSupport => "context_support",
        }
    }

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::Outline => OUTLINE,
            TemplateId::InitialAnswer => INITIAL_ANSWER,
            TemplateId::GapIdentification => GAP_IDENTIFICATION,
            TemplateId::SubqueryGeneration => SUBQUERY_GENERATION,
            TemplateId::NodeAnswer => NODE_ANSWER,
            TemplateId::Feedback => FEEDBACK,
            TemplateId::Refine => REFINE,
            TemplateId::BranchSynthesis => BRANCH_SYNTHESIS,
            TemplateId::ReasoningSystem => REASONING_SYSTEM,
            TemplateId::Step1 => STEP1,
            TemplateId::Step2 => STEP2,
            TemplateId::Step3a => STEP3A,
            TemplateId::Step3b => STEP3B,
            TemplateId::Sufficiency => SUFFICIENCY,
            TemplateId::CitationSupport => CITATION_SUPPORT,
            TemplateId::CitationWorthiness => CITATION_WORTHINESS,
            TemplateId::ContextSupport => CONTEXT_SUPPORT,
        }
    }

    /// Declared placeholders, in first-appearance order.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::Outline => &["question"],
            TemplateId::InitialAnswer => &["context", "input", "outline"],
            TemplateId::GapIdentification => &["guidance", "answer", "query"],
            TemplateId::SubqueryGeneration => &["gap_analysis", "query"],
            TemplateId::NodeAnswer => &["path", "query", "context"],
            TemplateId::Feedback => &["question", "answer", "outline"],
            TemplateId::Refine => &[
                "question",
                "original_answer",
                "feedback",
                "outline",
                "references",
            ],
            TemplateId::BranchSynthesis => &["path", "query", "answer", "supplement", "context"],
            TemplateId::ReasoningSystem => &["path", "query"],
            TemplateId::Step1 => &["paper_text", "query_text"],
            TemplateId::Step2 => &["step1_result_json", "query"],
            TemplateId::Step3a => &["step2_relationships_json", "step1_result_json", "query", "path"],
            TemplateId::Step3b => &[
                "step2_relationships_json",
                "step1_result_json",
                "query",
                "path",
                "analysis_from_step3a",
            ],
            TemplateId::Sufficiency => &["query", "paper_text"],
            TemplateId::CitationSupport => &["sentence", "reference"],
            TemplateId::CitationWorthiness => &["sentence"],
            TemplateId::ContextSupport => &["sentence", "context"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template} is missing a binding for {{{placeholder}}}")]
    MissingBinding {
        template: TemplateId,
        placeholder: String,
    },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
}

/// Byte ranges of declared `{name}` sites in a template body.
pub fn placeholder_sites(template: TemplateId) -> Vec<(std::ops::Range<usize>, &'static str)> {
    let body = template.body();
    let declared = template.placeholders();
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(close) = body[i + 1..].find('}') {
                let name = &body[i + 1..i + 1 + close];
                if let Some(&decl) = declared.iter().find(|d| **d == name) {
                    out.push((i..i + close + 2, decl));
                    i += close + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

pub fn render_prompt(
    template: TemplateId,
    bindings: &HashMap<&str, String>,
) -> Result<String, TemplateError> {
    for name in template.placeholders() {
        if !bindings.contains_key(name) {
            return Err(TemplateError::MissingBinding {
                template,
                placeholder: (*name).to_string(),
            });
        }
    }
    let body = template.body();
    let mut out = String::with_capacity(body.len() + bindings.values().map(String::len).sum::<usize>());
    let mut last = 0;
    for (range, name) in placeholder_sites(template) {
        out.push_str(&body[last..range.start]);
        out.push_str(&bindings[name]);
        last = range.end;
    }
    out.push_str(&body[last..]);
    Ok(out)
}

/// Convenience wrapper taking `(name, value)` pairs.
pub fn render<const N: usize>(
    template: TemplateId,
    pairs: [(&str, &str); N],
) -> Result<String, TemplateError> {
    let map: HashMap<&str, String> = pairs.iter().map(|(k, v)| (*k, (*v).to_string())).collect();
    render_prompt(template, &map)
}

pub const OUTLINE: &str = r##"Given a knowledge-intensive scientific question, please understand and analyze the question carefully. Consider key aspects like the intent behind the question, the motivations, potential flaws, and possible solutions. Based on this analysis, create a simple outline of the answer, specifying the parts and information that should be included in the response and the proportion each part should contribute. The total should add up to 100%. The outline should guide what should be covered in the response, offering clarity on the scope and balance of each section.
Your answer should be marked as [Response_Start] Answer [Response_End].
Here's an example outline:
Question: What strategies are used to improve robustness and safety of quadrotor UAVs in extreme weather conditions?
Answer: [Response_Start]
1. (33%) The answer should begin by explaining the importance of robustness and safety for quadrotor UAVs in extreme weather conditions.
2. (33%) The answer should discuss strategies and solutions to improve the robustness and safety of quadrotor UAVs in extreme weather conditions.
3. (33%) The answer should highlight the limitations or challenges associated with designing robust and safe solutions for quadrotor UAVs under extreme weather conditions.
[Response_End]
Now, please create an outline for this question: {question}"##;

pub const INITIAL_ANSWER: &str = r##"Provide a detailed and informative answer to the following research-related question. Your response should offer a comprehensive overview and be clearly structured in multiple paragraphs.
Organize your answer according to the key themes or sections identified in the outline below, and please note that the length of each part of the answer should be roughly the same as the percentage in the outline. Ensure each section is well-supported by multiple references, not just a single source.
Focus on giving a comprehensive overview of the topic, rather than providing a short or surface-level response.
Ensure the answer is well-structured, coherent and informative so that real-world scientists can gain a clear understanding of the subject. Rather than simply summarizing multiple papers one by one, try to organize your answers based on similarities and differences between papers.
Make sure to add citations to all citation-worthy statements using the provided references (References). More specifically, add the citation number at the end of each relevant sentence e.g., 'This work shows the effectiveness of problem X [1].' when the passage [1] in References provides full support for the statement.
Not all references may be relevant, so only cite those that directly support the statement.
If multiple references support a statement, cite them together (e.g., [1][2]). Yet, for each citation-worthy statement, you only need to add at least one citation, so if multiple evidences support the statement, just add the most relevant citation to the sentence.
Your answer should be accurate and rigorous, preferably with citations to support each sentence.
References: {context}
Question: {input}
Outline: {outline}
Your answer should be marked as [Response_Start] Answer [Response_End]."##;

pub const GAP_IDENTIFICATION: &str = r##"Please review the 'Current Answer' based on the 'Outline Guidance' and the 'Original Query'.
Your sole task is to accurately identify and describe what information, as required by the 'Outline Guidance', is missing from the 'Current Answer'. List these gaps clearly and specifically.
When reviewing, ignore any content related to future work, conclusions, or acknowledgments.
If the 'Current Answer' already fulfills all requirements in the 'Outline Guidance', state this explicitly. For example: 'The answer is complete and contains no information gaps.'
Outline Guidance: {guidance}
Current Answer: {answer}
Original Query: {query}"##;

pub const SUBQUERY_GENERATION: &str = r##"Please analyze the 'Identified Gaps' provided below.
If the 'Identified Gaps' list indicates that the answer is complete (e.g., the list is empty or explicitly states there are no gaps), you must return only '[end]terminate' in lowercase.
Otherwise, create one or more new search queries to gather the information needed to fill these gaps.
Follow these rules for creating queries:
- Merge Similar Queries: If multiple gaps can be addressed by similar queries, merge them.
- Minimize Query Count: Ensure each query explores a different sub-problem and provide as few queries as possible.
- Be Clear and Concise: Each query must be clear, concise, and contain necessary keywords to guide the retrieval process effectively.
- Do Not Reference the Answer: Do not mention or reference specific content from the 'Current Answer' in your new queries.
Please return your queries in the format below:
(1) Your query content.
(2) Additional query content if needed.
...
Identified Gaps: {gap_analysis}
Original Query (for context): {query}"##;

pub const NODE_ANSWER: &str = r##"You are in a retrieval chain that has been expanded to better answer the initial research-related core query.
The retrieval path is: {path}.
Currently, you are at the retrieval step for: {query}.
Provide a detailed and informative answer only to the query at current step. Your response should offer a concrete answer.
Make sure your answer includes summaries of relevant literature or texts or clear descriptions of their contribution to the query. When you make a claim, it is always best to have excerpts or citations to support them.
Ensure your answer is well-supported by references. Focus on giving a concrete answer to the query, rather than providing a short or surface-level response.
Ensure the answer is well-structured, coherent and informative so that real-world scientists can gain a clear understanding of the query. Rather than simply summarizing multiple papers one by one, try to organize your answers based on similarities and differences between papers.
Make sure to add citations to all citation-worthy statements using the provided references (References). More specifically, add the citation number at the end of each relevant sentence e.g., 'This work shows the effectiveness of problem X [1].' when the passage [1] in References provides full support for the statement.
Not all references may be relevant. You can read through the rationales and think on your own, and only cite those that directly support the statement.
If multiple references support a statement, cite them together (e.g., [1][2]). Yet, for each citation-worthy statement, you only need to add at least one citation, so if multiple evidences support the statement, just add the most relevant citation to the sentence.
Your answer should be accurate and rigorous, preferably with citations to support each sentence.
References: {context}
Your answer should be marked as [Response_Start] Answer [Response_End]."##;

pub const FEEDBACK: &str = r##"Given an answer to a scientific question based on the most recent scientific literature, give me your feedback.
Ensure the answer is well-structured, coherent and informative so that real-world scientists can gain a clear understanding of the subject. Do not simply summarize multiple papers one by one, but you do should include proper summaries of papers, and try to organize your answers based on similarities and differences between papers.
Make sure your answer includes summaries of relevant literature or texts or clear descriptions of their contribution to the query. When you make a claim, it is always best to have excerpts and citations to support them.
Regarding the content improvements, it is often helpful to ask for more concrete results, applications, or methodologies to different tasks, elaborate on details of crucial methods, or suggest including explicit excerpts and citations as supports.
Stylistic improvements can include better organizations or writing enhancements.
Your answer should be marked as [Response_Start] and [Response_End].
If you think the current answer basically meets all the requirements and has no obvious room for improvement, and can be used as a candidate for a good answer, then return Feedback: [terminate] in lower case.
Else, prioritize the feedback by listing the most critical improvements first.
Each feedback should be preceded by 'Feedback: '.
The answer should be organized according to the outline below.
Question: {question}
Answer: {answer}
Outline: {outline}
[Response_Start]Feedback: [Response_End]
Now, please generate feedback for this question."##;

pub const REFINE: &str = r##"You have been given a research-related question, an initial comprehensive answer, and some feedback pointing out possible improvements.
Now, please refine the answer according to the following guidelines:

1. Focus and Organization:
- Provide a thorough, multi-paragraph response, following the key themes or sections identified in the outline.
- Ensure that the approximate length and level of detail for each section is consistent with the proportions indicated in the outline, but don't include the percentage of the proportion in your answer.
- Rather than merely listing studies one by one, organize the discussion based on similarities or differences among the referenced works.

2. References and Citations:
- Use references from the 'References' section to support all citation-worthy statements, adding their citation number at the end of the sentence, e.g., '[1]'.
- If multiple references directly support the same statement, you may group them like '[1][2]'.
- Only cite references that truly support the claim, and ensure you re-index citations to match the final reference list if needed.
- Do not introduce references that are irrelevant to the statements being made.

3. Clarity and Comprehensiveness:
- Incorporate feedback to clarify or expand on crucial details, methods, or results.
- Strive for a more comprehensive overview of the topic rather than a surface-level summary.
- When making a claim or stating an important finding, it is best to briefly illustrate or quote relevant points from the supporting references.

4. Feedback Integration:
- Only modify parts of the original answer where the feedback indicates improvements are needed, keeping the other sentences unchanged.
- Do not omit any crucial information from the original answer unless the feedback explicitly states that certain sentences are incorrect or redundant and should be removed.
- If you add new paragraphs, ensure you are not duplicating content already present in the original response.

5. Stylistic Consistency:
- Keep the original paragraphs and new lines intact unless the feedback requires changes in structure.
- Maintain a coherent narrative flow, with smooth transitions between sections.
- Use clear, professional language that real-world scientists would find understandable and informative.

6. Final Formatting:
- Your refined answer must be enclosed between '[Response_Start]' and '[Response_End]'.
- Make sure the final version is well-structured, balanced according to the outline, and thoroughly addresses the question.

Below are the materials you have to work with:
- Question: {question}
- Original Answer: {original_answer}
- Feedback: {feedback}
- Outline: {outline}
- References: {references}

Following these instructions, please refine the answer accordingly.
Your final answer should be marked between [Response_Start] and [Response_End]."##;

pub const BRANCH_SYNTHESIS: &str = r##"You are in a retrieval chain that has been expanded to better answer the initial research-related core query.
The retrieval path is: {path}.
Currently, you are at the retrieval step for query: {query}.
Please review the current research-related query and its initial answer and read them carefully.
The initial answer may have some shortcomings, so we performed additional searches and supplemented information. Now please combine the information from the supplemented query and answer to optimize the original answer, offering a comprehensive overview and clearly structured in multiple paragraphs.
Also you should try to keep the original answer content's structure unchanged.
Ensure the answer is well-structured, coherent and informative so that real-world scientists can gain a clear understanding of the subject, rather than providing a short or surface-level response.
And re-cite the citations in the answer according to the latest reference list below.
Make sure your answer includes summaries of relevant literature or texts or clear descriptions of their contribution to the query. When you make a claim, it is always best to have excerpts or citations to support them.
Make sure to add citations to all citation-worthy statements using the provided references (References). More specifically, add the citation number at the end of each relevant sentence e.g., 'This work shows the effectiveness of problem X [1].' when the passage [1] in References provides full support for the statement.
Not all references may be relevant. You can read through the rationales and think on your own, and only cite those that directly support the statement.
If multiple references support a statement, cite them together (e.g., [1][2]). Yet, for each citation-worthy statement, you only need to add at least one citation, so if multiple evidences support the statement, just add the most relevant citation to the sentence.
Your answer should be accurate and rigorous, preferably with citations to support each sentence.
Here is the initial answer: {answer}
Here is the supplemented queries and answers: {supplement}
Here is the references: {context}
Your answer should be marked as [Response_Start] Answer [Response_End]."##;

pub const REASONING_SYSTEM: &str = r##"You are in a retrieval chain that has been expanded to better answer the initial core query.
The retrieval path is: {path}.
Currently, you are at the retrieval step for: {query}.
You have a set of partial paper texts (abstracts or snippets).
Your goal is to analyze each text's contribution and the relationship between them, build symbolic relationships,
and decide which texts are most relevant and contributing to the query and the overall chain."##;

pub const STEP1: &str = r##"We have the following candidate texts from different papers (abstracts or snippets): {paper_text}
The query is: {query_text}

Step 1 Task:
1. For each paper, identify its key content segments and label them with:
    - T (theoretical part: theorem, definitions, main theoretical results),
    - E (experimental part: methodology, experiment details, results),
    - A (applications),
    - or other labels if needed (e.g., 'M' for methodology if it's not purely experimental).
2. For each segment, provide a brief summary (1–2 sentences)
    and assess its relevance to the query as High, Medium, or Low.
Output format (example):
{
    "papers": [
        {
            "paper_index": 1,
            "segments": [
                { "label": "T", "description": "...", "relevance": "High" },
                { "label": "E", "description": "...", "relevance": "Medium" }
            ]
        },
        ...
    ]
}
Please keep the output structure strictly without additional comments."##;

pub const STEP2: &str = r##"Below is the structured breakdown of each paper's segments from Step 1:
{step1_result_json}
Using that breakdown, please establish symbolic relationships among the papers and the query: {query}
   - T (theoretical part: theorem, definitions, main theoretical results),
   - E (experimental part: methodology, experiment details, results),
   - A (applications),
   - or other labels if needed (e.g., 'M' for methodology if it's not purely experimental).
For example:
 - "[1]T -> [2]T" means paper1's theoretical part informs or extends paper2's theoretical part.
 - "[1]E -> [Q]" means paper1's experiment part contributes directly to answering the query.
 - "[3]A -> [2]T" means paper3's application part provides insights for paper2's theory.
In each relationship, use the format: "[paper_index][label] -> [paper_index or Q][label (if paper)]".
If the second target is the query itself, just use [Q].
Output format (example):
{
    "relationships": [
        { "symbol": "[1]T -> [Q]", "rationale": "Paper1's theoretical result directly addresses the phenomenon in the query." },
        { "symbol": "[2]E -> [3]T", "rationale": "Paper2's experiment suggests data that confirms the theorem in Paper3." },
        ...
    ]
}
Please keep the rationale concise, and keep the output structure strictly without additional comments."##;

pub const STEP3A: &str = r##"Given the symbolic relationships from Step 2 and the paper breakdowns from Step 1, your task is to perform a detailed analysis.
Symbolic Relationships: {step2_relationships_json}
Paper Breakdowns: {step1_result_json}
Query: '{query}'
Retrieval Chain: '{path}'
Your Task:
Analyze the coherence and relevance of the papers and their relationships in the context of the query. Do NOT decide which papers to keep or discard yet. Instead, provide step-by-step reasoning that addresses the following:
- Identify Core Papers: Which papers (and their segments like T, E, A) appear to be most central to answering the query? Explain why.
- Identify Supporting Papers: Which papers provide useful context or supplementary information but may not be essential?
- Identify Contradictions or Weak Links: Are there any relationships in the chain (e.g., T → T) that seem weak, irrelevant, or contradictory? For instance, does one paper's experiment invalidate another's theory?
- Identify Irrelevant Papers: Are there papers that seem entirely tangential or irrelevant to the specific query? Explain your reasoning.
Your output should be a clear, textual analysis that will be used in the next step to make final decisions."##;

pub const STEP3B: &str = r##"We now have the symbolic relationships from Step 2:
{step2_relationships_json}
Where we have the symbols:
    - T (theoretical part: theorem, definitions, main theoretical results),
    - E (experimental part: methodology, experiment details, results),
    - A (applications),
    - or other labels if needed (e.g., 'M' for methodology if it's not purely experimental).
And the breakdown of each paper from Step 1:
{step1_result_json}
For the query "{query}" within the context of the overall retrieval chain "{path}".
And based on the detailed 'Coherence and Relevance Analysis' provided below, your task is to make the final decisions on paper selection and ranking.
Coherence and Relevance Analysis: {analysis_from_step3a}
Your Task:
- Finalize Selection: Decide which papers to keep and which to discard based only on the provided analysis.
- Rank Kept Papers: Create a final ranked list (from most to least relevant) of the papers you decide to keep.
- Justify Decisions: For each kept paper, provide a concise justification for its rank. For each discarded paper, provide a brief reason for its exclusion. All justifications must be derived from the analysis. (You may consider the segments ([1]T, [1]E, etc.) internally, but your final output should only include paper indexes.)
Output Format:
You must return the final result in a valid JSON structure, exactly as shown in the example below, without any additional text or comments.
{
    "final_selection": [
        { "paper_index": 1, "rank": 1, "justification": "..." },
        { "paper_index": 3, "rank": 2, "justification": "..." }
    ],
    "discarded_items": [
        { "paper_index": 2, "reason": "Not relevant to the query" }
    ]
}"##;

pub const SUFFICIENCY: &str = r##"You are deciding whether the retrieved papers below are enough to answer a research query, or whether the search should be widened along the citation graph (papers they cite and papers citing them).
Query: {query}
Retrieved papers: {paper_text}
Reply with exactly one word on the first line: SUFFICIENT if these papers already cover what the query needs, or EXPAND if important foundational, replication or follow-up work is likely missing. Then give a one-sentence rationale."##;

pub const CITATION_SUPPORT: &str = r##"Decide whether the reference passage fully supports the statement.
Statement: {sentence}
Reference: {reference}
Answer with yes or no only."##;

pub const CITATION_WORTHINESS: &str = r##"Decide whether the sentence below makes a factual or scientific claim that should be backed by a citation. Connective, structural or purely introductory sentences do not need one.
Sentence: {sentence}
Answer with yes or no only."##;

pub const CONTEXT_SUPPORT: &str = r##"Decide whether the statement is supported by the retrieved context, either directly or through multi-hop reasoning over several passages.
Statement: {sentence}
Context: {context}
Answer with yes or no only."##;

#[cfg(test)]
mod tests {
    use super::*;
    use regex::Regex;

    #[test]
    fn declared_placeholders_match_body() {
        let re = Regex::new(r"\{([a-z0-9_]+)\}").unwrap();
        for t in TemplateId::ALL {
            let found: Vec<&str> = re
                .captures_iter(t.body())
                .map(|c| c.get(1).unwrap().as_str())
                .collect();
            for name in &found {
                assert!(t.placeholders().contains(name), "{t}: undeclared {{{name}}}");
            }
            for name in t.placeholders() {
                assert!(found.contains(name), "{t}: declared {{{name}}} never used");
            }
        }
    }

    #[test]
    fn outline_prompt_literal_text() {
        let out = render(TemplateId::Outline, [("question", "Q")]).unwrap();
        assert!(out.contains("a simple outline of the answer"));
        assert!(out.ends_with("Now, please create an outline for this question: Q"));
    }

    #[test]
    fn step2_keeps_example_symbols() {
        let out = render(TemplateId::Step2, [("step1_result_json", "{}"), ("query", "X")]).unwrap();
        assert!(out.contains("[1]T -> [2]T"));
        assert!(out.contains("the query: X\n"));
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let err = render(TemplateId::NodeAnswer, [("path", "a"), ("query", "b")]).unwrap_err();
        assert_eq!(
            err,
            TemplateError::MissingBinding {
                template: TemplateId::NodeAnswer,
                placeholder: "context".into()
            }
        );
        assert!(err.to_string().contains("{context}"));
    }

    #[test]
    fn values_are_not_re_expanded() {
        let out = render(TemplateId::Outline, [("question", "{question}")]).unwrap();
        assert!(out.ends_with("this question: {question}"));
    }

    #[test]
    fn unknown_template_rejected() {
        assert!(matches!(
            "no_such".parse::<TemplateId>(),
            Err(TemplateError::UnknownTemplate(_))
        ));
        assert_eq!("step3b".parse::<TemplateId>().unwrap(), TemplateId::Step3b);
    }
}
